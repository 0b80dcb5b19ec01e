"""Geometry-guided multi-view stereo: plane-sweep depth, hashed TSDF fusion and rendered geometry hints."""
