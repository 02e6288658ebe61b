"""
RDCNet
Recurrent dilated convolutions for instance segmentation, built on a small
numpy autograd engine.
"""

__version__ = '0.1.0'
