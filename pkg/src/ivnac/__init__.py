"""Invertible-network PET attenuation correction on synthetic head phantoms."""

__version__ = "0.1.0"
