"""Desk-scale laboratory for incremental open-set recognition.

Fixed equiangular-tight-frame prototypes, virtual-intrinsic interactive
training, stratified boundary rectification, an incremental task protocol
with exemplar rehearsal, and open-set metrics, all with verifiable
gradients and metric oracles.
"""

__version__ = "0.1.0"
