"""Entropic optimal transport solvers and a prompt-alignment classifier.

The package is organised bottom-up: `numerics` holds shared dense-array
kernels, `transport` the balanced/unbalanced Sinkhorn-style solvers,
`oracle` an independent brute-force minimizer used to validate them.
`features`, `prompts`, `classifier` and `trainer` build the alignment
model on top; `cli` exposes everything as subcommands.
"""

__version__ = "0.1.0"
