from fedlab.nn import *
from fedlab.datasets import *
from fedlab.aggregation import *
from fedlab.drop import *
from fedlab.analysis import *
from fedlab.records import *
from fedlab.config import *
from fedlab.defenses import *
from fedlab.federation import *

__version__ = "0.1.0"
