"""partialupdates package to simulate low-communication training with partial parameter updates."""

from .errors import *
from .utils import *
from .model import *
from .slicing import *
from .optim import *
from .costmodel import *
from .checkpoint import *
from .orchestrator import *
from .messages import *
from .ui import *
from .datasets import *
