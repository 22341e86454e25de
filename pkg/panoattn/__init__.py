"""panoattn: windowed multi-view attention over panoramic camera features."""

__version__ = "1.0.0"
