"""Desk-scale benchmark harness for unsupervised domain adaptation.

Synthetic two-domain datasets with controllable covariate shift, four small
backbone families, six adaptation methods behind one standardized trainer,
subsampling and pretraining protocols, a domain-discrimination probe, and a
deterministic grid runner with CSV/markdown/SVG reporting.
"""

from .data import (
    DatasetBundle,
    LabeledSet,
    SamplingPlan,
    ShiftSpec,
    make_train_test_split,
    make_two_domain_synthetic,
    random_subsample,
    split_class_subsample,
    stratified_subsample,
)
from .grid import GridConfig, ResultsStore, execute_and_aggregate, expand_grid
from .methods import LossBundle, MethodConfig, make_method
from .metrics import MetricsRecord, ProbeCurve, domain_probe, relative_drop
from .models import ArchSpec, ModelAssembly, build_assembly, default_arch, grad_reverse, predict
from .pretrain import PretextSpec, build_pretext_subset, contrastive_pretrain, supervised_pretrain
from .trainer import DatasetSpec, OptimizerSpec, RunConfig, RunRecord, evaluate, train_run

__version__ = "0.1.0"
