"""
stegonet: disguise a secret network inside a stego network, recover it with a
key, and audit how detectable the disguise is.
"""
__version__ = "1.0.0"
