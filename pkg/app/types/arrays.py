import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]
BoolArray = NDArray[np.bool_]

# (N, 3) world points / integer voxel coordinates
Points = FloatArray
Coords = IntArray
