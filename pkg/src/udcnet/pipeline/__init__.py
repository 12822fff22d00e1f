from .config import VARIANTS, AdamConfig, RunConfig, Variant, config_from_dict, load_config, save_config
from .dataset import Case, Dataset, load_dataset, prepare_dataset
from .optim import Adam
from .train import StepPlan, Trainer, infer_probability, udc_objective
