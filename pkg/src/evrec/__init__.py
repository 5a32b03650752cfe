"""evrec: event-camera video reconstruction toolkit.

Simulates event streams from textured scenes under homographic camera
motion, encodes event windows as spatio-temporal voxel tensors, trains a
recurrent convolutional reconstruction network on the simulated data, and
synthesizes grayscale, high-framerate, and color video from events.
"""

__version__ = "0.1.0"
