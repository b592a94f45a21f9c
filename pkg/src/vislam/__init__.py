"""Visual-inertial SLAM backend with Sim(3) loop closure and a Gaussian map."""

__version__ = "0.1.0"
