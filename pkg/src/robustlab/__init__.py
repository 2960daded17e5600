"""Desk-scale laboratory for studying how pre-training transfers adversarial
non-robustness into fine-tuned image classifiers.

Subpackages:
    autodiff    -- minimal reverse-mode AD engine and SGD step
    data        -- deterministic synthetic dataset generators and archives
    models      -- small conv nets with an explicit feature/classifier split
    training    -- standard / fine-tune / adversarial / steepness-regularized regimes
    attacks     -- FGSM, PGD and targeted universal perturbations
    metrics     -- AOI/AAI/DR, CCA, MMD, local Lipschitzness, UAP probes
    experiments -- declarative experiment runner, caching, CSV + figure reports
"""

__version__ = "0.1.0"
