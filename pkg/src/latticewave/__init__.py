"""Wave-based crack detection toolkit: lattice simulator, dataset factory, metrics."""

__version__ = "0.1.0"
