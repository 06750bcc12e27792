"""
End-to-end tests for the SMC simulator.

This package contains tests that run full-size network descriptors through
search, calibration and simulation and compare against reference figures.
"""
