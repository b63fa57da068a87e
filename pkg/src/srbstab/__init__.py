"""Numerical statistical-stability toolkit for Lorenz-type flows and their quotient maps."""
