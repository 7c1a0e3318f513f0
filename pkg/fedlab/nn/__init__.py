from fedlab.nn.base import *
from fedlab.nn.layers import *
from fedlab.nn.models import *
from fedlab.nn.training import *
