"""Double two-scale PINNs for linear-quadratic optimal control of convection-dominated equations."""
