__all__ = ["BaseModel", "ViT"]
