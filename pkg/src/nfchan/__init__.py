"""Near-field XL-MIMO channel reconstruction toolkit.

Pipeline: synthesize pilot observations for a multipath scene, project them
onto a Cartesian or polar codebook, render the result as a grayscale channel
image, pull coarse path locations out of the image (classical peak picking or
a CNN keypoint detector), then refine positions and complex gains with a
small-scale Newtonized OMP. An exhaustive NNOMP baseline and a benchmark
harness measure the accuracy/cost trade.
"""

__version__ = "0.1.0"
