"""
Enumerable one-dimensional prior with an exact posterior over the maximizer.

A fixed set of RFF function draws stands in for the prior; the maximizer of
each draw is taken on a regular grid of cell centres. Observations carry
Gaussian noise of known width, so p(f_j | D) is computable by weighting
every draw with its likelihood, and the posterior over the maximizer cell
follows by summing weights per cell. This is the Thompson-sampling target a
trained model should reproduce.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from loguru import logger
from scipy import special

from .funcprior import (
    Corpus,
    Dataset,
    FunctionSample,
    PriorHyperparams,
    TrainingPair,
    sample_feature_map,
)


TOY_FUNCTIONS = 64
TOY_GRID = 64
TOY_LENGTHSCALE = 0.1
TOY_SIGNAL_VARIANCE = 1.0
TOY_NUM_FEATURES = 128
TOY_NOISE = 0.1             # observation noise std, also the likelihood width
TOY_N_MIN = 1
TOY_N_MAX = 4


@dataclass
class ToyPrior:
    functions: list[FunctionSample]
    grid_size: int
    noise: float

    @property
    def grid(self) -> np.ndarray:
        """Cell centres (i + 0.5) / G."""
        return (np.arange(self.grid_size) + 0.5) / self.grid_size

    @property
    def hp(self) -> PriorHyperparams:
        """Point-mass hyperprior at the fixed lengthscale and signal variance of the draws."""
        feature_map = self.functions[0].feature_map
        lengthscale = float(feature_map.lengthscales[0])
        return PriorHyperparams(
            dim=1,
            num_features=feature_map.num_features,
            lengthscale_range=(lengthscale, lengthscale),
            signal_variance_range=(feature_map.signal_variance, feature_map.signal_variance),
        )

    def grid_values(self) -> np.ndarray:
        """(F, G) values of every draw at the cell centres."""
        grid = self.grid[:, None]
        return np.vstack([fs.evaluate(grid) for fs in self.functions])

    @cached_property
    def maximizer_cells(self) -> np.ndarray:
        """Grid cell of each draw's maximizer, shape (F,)."""
        return np.argmax(self.grid_values(), axis=1)

    @classmethod
    def build(
        cls,
        num_functions: int = TOY_FUNCTIONS,
        grid_size: int = TOY_GRID,
        noise: float = TOY_NOISE,
        seed: int = 0,
    ) -> "ToyPrior":
        rng = np.random.default_rng(seed)
        hp = PriorHyperparams(dim=1, num_features=TOY_NUM_FEATURES)
        functions = []
        for _ in range(num_functions):
            feature_map = sample_feature_map(
                hp, rng, lengthscales=np.array([TOY_LENGTHSCALE]), signal_variance=TOY_SIGNAL_VARIANCE
            )
            functions.append(FunctionSample(feature_map, rng.standard_normal(hp.num_features)))
        return cls(functions=functions, grid_size=grid_size, noise=noise)

    # --- sampling -----------------------------------------------------------

    def sample_context(self, rng: np.random.Generator, n: int) -> tuple[int, Dataset]:
        """A uniformly chosen draw and n noisy observations of it at uniform x."""
        index = int(rng.integers(len(self.functions)))
        X = rng.uniform(0.0, 1.0, size=(n, 1))
        y = self.functions[index].evaluate(X) + self.noise * rng.standard_normal(n)
        return index, Dataset(X, y)

    def sample_pair(self, rng: np.random.Generator, n_min: int = TOY_N_MIN, n_max: int = TOY_N_MAX) -> TrainingPair:
        """x* is uniform inside the maximizer cell, so binned densities are exact cell masses."""
        n = int(rng.integers(n_min, n_max + 1))
        index, dataset = self.sample_context(rng, n)
        cell = int(self.maximizer_cells[index])
        x_star = (cell + rng.uniform()) / self.grid_size
        y_star = float(self.functions[index].evaluate(np.array([[x_star]]))[0])
        return TrainingPair(x_star=np.array([x_star]), dataset=dataset, y_star=y_star)

    def generate_corpus(self, count: int, seed: int, n_min: int = TOY_N_MIN, n_max: int = TOY_N_MAX) -> Corpus:
        rng = np.random.default_rng(seed)
        pairs = [self.sample_pair(rng, n_min, n_max) for _ in range(count)]
        logger.debug(f"Toy corpus: {count} pairs over {len(self.functions)} functions")
        return Corpus(hp=self.hp, pairs=pairs)

    # --- exact posterior ------------------------------------------------------

    def function_posterior(self, D: Dataset) -> np.ndarray:
        """p(f_j | D) for every draw j under the Gaussian observation model."""
        residuals = np.vstack([fs.evaluate(D.X) - D.y for fs in self.functions])
        log_weights = -0.5 * np.sum(residuals * residuals, axis=1) / (self.noise ** 2)
        return special.softmax(log_weights)

    def maximizer_posterior(self, D: Dataset) -> np.ndarray:
        """p(x* in cell g | D), shape (G,)."""
        weights = self.function_posterior(D)
        return np.bincount(self.maximizer_cells, weights=weights, minlength=self.grid_size)


def bin_to_grid(samples: np.ndarray, grid_size: int) -> np.ndarray:
    """Empirical cell frequencies of points in [0,1]."""
    cells = np.clip(np.floor(np.ravel(samples) * grid_size).astype(int), 0, grid_size - 1)
    return np.bincount(cells, minlength=grid_size) / cells.size


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def suggestion_tv(model, toy: ToyPrior, contexts: int, samples: int, seed: int) -> float:
    """
    Mean TV distance between binned model samples and the exact maximizer
    posterior over `contexts` random contexts drawn from the toy prior.

    `model` is anything with sample(D, q, rng) -> (q, 1) points.
    """
    rng = np.random.default_rng(seed)
    distances = []
    for _ in range(contexts):
        n = int(rng.integers(TOY_N_MIN, TOY_N_MAX + 1))
        _, D = toy.sample_context(rng, n)
        exact = toy.maximizer_posterior(D)
        empirical = bin_to_grid(model.sample(D, samples, rng), toy.grid_size)
        distances.append(tv_distance(exact, empirical))
    return float(np.mean(distances))
