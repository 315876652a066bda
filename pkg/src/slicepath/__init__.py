"""slicepath: slice images to material-extrusion toolpaths via denoising diffusion.

Submodules are imported lazily by the CLI so that thread-count environment
variables can be set before numpy loads; import them explicitly in library use:

    from slicepath import gcode, geometry, dataset, diffusion
"""

__version__ = "0.1.0"
