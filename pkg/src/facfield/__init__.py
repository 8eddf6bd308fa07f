"""facfield: frequency-factorized neural SDF fields for animatable avatars."""

__version__ = "0.1.0"
