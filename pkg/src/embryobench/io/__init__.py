"""Persistent data products: volumes, object tables, configs, manifests."""
