"""mvrecon: multi-view implicit human reconstruction at desk scale.

Library layout:

* ``geometry``   meshes, scalar grids, SDFs, marching cubes
* ``camera``     pinhole cameras and proxy-space normalization
* ``rasterize``  software z-buffer rendering and occlusion compositing
* ``body``       capsule-skeleton body proxy and linear blend skinning
* ``neural``     float32 layers with hand-written backward passes
* ``fusion``     multi-view attention encoder and mean-pooling baseline
* ``pipeline``   coarse/fine pixel-aligned networks, training, reconstruction
* ``temporal``   skinning-warped sliding-window SDF fusion
* ``evaluate``   chamfer / point-to-surface metrics and the benchmark harness
* ``scenegen``   synthetic multi-person scene and dataset generation
* ``cli``        command-line entry point
"""

__version__ = "0.1.0"
