"""FastAPI service layer over the maekit core package."""
