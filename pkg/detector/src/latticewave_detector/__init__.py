"""CNN crack detector operating on simulated wave-field datasets.

Consumes dataset manifests and sample blobs produced by the `latticewave`
package, trains the receiver-grid convolutional network, and exports per-sample
16x16 probability grids in the shared prediction-file format.
"""

__version__ = "0.1.0"
