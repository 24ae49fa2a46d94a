"""forge: simulated side-channel datasets, a transformer trace classifier, and
the lattice step that turns predicted nonce bits into ECDSA keys."""

__version__ = "0.1.0"
