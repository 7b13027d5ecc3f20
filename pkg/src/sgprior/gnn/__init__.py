"""Expectation-biased heterogeneous graph network over the joint scene graph."""
