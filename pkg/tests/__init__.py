import unittest
from .tensor import *
from .config import *
from .optim import *
from .model import *
from .checkpoint import *
from .tasks import *
from .data import *
from .trainer import *
from .diagnostics import *
from .audit import *
from .cli import *

if __name__ == '__main__':
    unittest.main(exit=False)
