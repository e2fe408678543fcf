"""Online video instance segmentation driven by per-instance ID embeddings.

Each instance gets a small integer ID whose embedding is written into a
per-pixel memory.  Attention over that memory carries identities into the
next frame, and a unique assignment step resolves them.
"""

__version__ = "0.1.0"
