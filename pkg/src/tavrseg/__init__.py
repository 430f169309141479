from .volume_common import *
from .voxel_ops import *
from .enrich import *
from .skeleton import *
from .losses import *
from .metrics import *
from .phantom import *
from .optim import *
from .nifti_io import *
from .config import *
from .dataset import *
