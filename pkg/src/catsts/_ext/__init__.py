"""Compiled kernels. Built from ``_conv.pyx`` by ``setup.py``; optional."""
