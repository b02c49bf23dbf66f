"""Numerical core: adapters, curvature, posterior and predictive"""
