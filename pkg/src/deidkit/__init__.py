"""Identity obfuscation under local differential privacy, in feature space.

Submodules are imported on demand; ``deidkit.cli`` is the command-line entry.
"""

__version__ = "0.1.0"
