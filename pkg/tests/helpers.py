import numpy as np

from causalflow.synthgen import GeneratorConfig, generate
from causalflow.training import CausalFlowModel, Normalizer, TrainConfig


def random_model(benchmark, n=200, seed=0, variant="dag", hidden=6, scale=0.5):
    """A model with non-trivial random conditioners, ready for inference without training."""
    ds, g = generate(benchmark, GeneratorConfig(seed=seed, n_patients=n))
    cfg = TrainConfig(seed=seed, hidden_dim=hidden, flow_hidden=hidden, variant=variant)
    model = CausalFlowModel.for_dataset(ds, g, cfg)
    model.normalizer = Normalizer.fit(ds, model.binary_covariates, cfg.dequant_alpha)
    r = np.random.default_rng(seed + 100)
    for node in model.flow.nodes:
        node.W2[...] = r.normal(scale=scale, size=node.W2.shape)
        node.b2[...] = r.normal(scale=scale, size=node.b2.shape)
    model.trained = True
    return model, ds, g


def tiny_panel(covariates, outcome=None, treatment=None, names=None):
    """A bare PanelDataset around a covariate array with NaN marking missing cells."""
    from causalflow.synthgen import PanelDataset

    x = np.asarray(covariates, dtype=float)
    n, t, d = x.shape
    r = np.random.default_rng(0)
    return PanelDataset(
        benchmark="tiny",
        seed=0,
        covariate_names=list(names or [f"c{j}" for j in range(d)]),
        covariates=x,
        treatment=r.integers(0, 2, size=(n, t)).astype(float) if treatment is None else np.asarray(treatment, float),
        outcome=r.normal(size=(n, t)) if outcome is None else np.asarray(outcome, float),
        mask=np.isnan(x).astype(np.uint8),
        po_control=None,
        po_treated=None,
        alive=np.ones((n, t)),
    )
