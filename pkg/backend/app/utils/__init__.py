"""Binary codecs and seed derivation"""
