"""Sliced 3D-2D rigid registration of a CT volume to breathing
ultrasound-like frame sequences.

Submodules are imported explicitly (``from kidreg import regnet``); the
package root stays import-free so the CLI can configure thread limits
before numpy loads its BLAS.
"""

__version__ = "0.1.0"
