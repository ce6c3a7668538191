"""Double targeted universal adversarial perturbations on a small numpy autograd."""

from .attack import (AttackSpec, Perturbation, craft, craft_multi2one, craft_patch, load_perturbation,
                     loss_nt, loss_t1, loss_t2, loss_total, project, save_perturbation)
from .autograd import Tensor, backward
from .data import (ClassSplit, LabeledDataset, blob_fixture, build_split, load_cifar_binary, load_idx,
                   sample_batch, synth_blobs)
from .evaluate import EvalReport, SweepResult, evaluate, run_scenarios, sweep
from .models import Classifier, build, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"
