"""
Laplace-LoRA

Post-hoc Laplace approximation over the low-rank adapters of a small MLP
classifier:
- MAP fine-tuning of LoRA adapters on a frozen base network
- KFAC curvature with a low-rank large factor built by incremental SVD
- Prior precision tuned on the evidence or on validation log-likelihood
- Linearized predictive (MC joint / independent, probit, Laplace bridge)
- Temperature scaling, MC dropout and ensemble baselines, ACC / ECE / NLL
"""

__version__ = "0.1.0"
__author__ = "Bernardo Kuri"
__all__ = ["__version__"]
