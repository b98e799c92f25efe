"""Koopman-operator tracking MPC: lifted linear models fitted from data,
robust constraint tightening against bounded model error, a tracking MPC
solved as a QP each step, and closed-loop simulation of benchmark plants."""

__version__ = "0.1.0"
