"""retscreen: community retinal-photo screening pipeline engine."""

__version__ = "0.1.0"
