__all__ = ["BaseReader", "BaseRunner", "Checkpoint", "analysis", "convert"]
