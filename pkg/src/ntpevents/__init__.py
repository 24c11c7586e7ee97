"""Internet event detection from passive NTP one-way-delay measurements."""

__version__ = "0.1.0"
