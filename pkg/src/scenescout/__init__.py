"""Robot/base-station toolkit for online interesting-scene detection.

A visual-memory novelty detector runs on the robot and flags candidate
frames; an operator (human or scripted oracle) reviews them at the base
station; a last-layer detection head is fine-tuned online on the
annotations and synchronized back to the robot over a bandwidth-limited
link.
"""

__version__ = "0.1.0"
