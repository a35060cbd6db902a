"""
fibo – in-context batch Bayesian optimization.

A conditional flow pretrained on prior-sampled (optimum, dataset) pairs
proposes batches of query points without any inner acquisition
optimization.
"""

__version__ = "0.1.0"
