# networks/__init__.py
from networks.bundle import NetworkBundle
from networks.checkpoint import load_checkpoint, save_checkpoint
from networks.hash_grid import HashGrid, hash_encode
from networks.optim import OptimState, adam_step, onecycle_lr
from networks.siren import SineLayer, SirenMlp, forward_with_time_derivative
