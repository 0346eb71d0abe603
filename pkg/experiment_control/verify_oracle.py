"""
Check the Hebbian rules against their brute-force references:

    - linear HPCA on a planted-covariance Gaussian stream converges to the
      leading eigenvectors found by exact PCA
    - WTA on two separated Gaussian clusters converges to the cluster means
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from experiment_control.datasets import synth_gaussian_stream
from hebbian_engine.hebbian import LINEAR_HPCA, HebbianLayerState, hpca_update, wta_update
from hebbian_engine.oracle import exact_pca, kmeans_centroids, subspace_angle
from hebbian_engine.tensor_core import Rng

PLANTED_EIGVALS = (9.0, 4.0, 1.0, 0.25, 0.04)
HPCA_NEURONS = 3
HPCA_LR = 5e-3
HPCA_STEPS = 20000
HPCA_BATCH = 32
MAX_ANGLE_DEG = 8.0

CLUSTER_CENTERS = np.array([[1.0, 0.0], [0.0, 1.0]])
CLUSTER_STD = 0.1
WTA_LR = 1e-2
WTA_STEPS = 2000
MAX_CENTROID_DISTANCE = 0.1


@dataclass
class OracleCheck:
    name: str
    value: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.value < self.threshold


def hpca_vs_pca(seed: int = 0, steps: int = HPCA_STEPS) -> OracleCheck:
    """Largest angle between HPCA neuron i and the i-th principal direction."""
    start = time.perf_counter()
    stream = synth_gaussian_stream(len(PLANTED_EIGVALS), PLANTED_EIGVALS, seed)
    state = HebbianLayerState.initialize(
        HPCA_NEURONS, stream.dim, Rng(seed).spawn("hpca-init"), learning_rate=HPCA_LR
    )
    for _ in tqdm(range(steps), desc="linear HPCA", leave=False):
        state.apply(hpca_update(state, stream.sample(HPCA_BATCH), LINEAR_HPCA))
    oracle = exact_pca(stream.sample(20000))
    angle = subspace_angle(state.weights, oracle.top(HPCA_NEURONS))
    return OracleCheck("HPCA vs exact PCA (deg)", angle, MAX_ANGLE_DEG, time.perf_counter() - start)


def two_clusters(seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    rng = Rng(seed).spawn("clusters")
    assignment = (rng.uniform(0.0, 1.0, n) < 0.5).astype(int)
    samples = CLUSTER_CENTERS[assignment] + rng.normal((n, 2), CLUSTER_STD)
    return samples, assignment


def wta_vs_centroids(
    seed: int, steps: int = WTA_STEPS, learning_rate: float = WTA_LR
) -> OracleCheck:
    """
    Largest distance between a WTA weight vector and its cluster's sample mean.

    The neurons start on data points: with y = w.x a neuron that wins while
    pointing away from its input is pushed further away, so a symmetric random
    init can leave one neuron dead.
    """
    start = time.perf_counter()
    samples, assignment = two_clusters(seed, steps)
    # first sample and the sample farthest from it
    first = samples[0]
    farthest = samples[np.argmax(np.linalg.norm(samples - first, axis=1))]
    state = HebbianLayerState(
        weights=np.stack([first, farthest]), running_input_mean=np.zeros(2), learning_rate=learning_rate
    )
    for x in samples:
        state.apply(wta_update(state, x))

    means = np.stack([samples[assignment == k].mean(axis=0) for k in range(2)])
    centroids = kmeans_centroids(samples, state.weights)
    distances = np.linalg.norm(state.weights[:, None, :] - means[None, :, :], axis=2)
    # each neuron must sit on a distinct cluster mean
    matched = np.argmin(distances, axis=1)
    if len(set(matched.tolist())) < 2:
        worst = float("inf")
    else:
        worst = float(distances[np.arange(2), matched].max())
    worst = max(worst, float(np.linalg.norm(state.weights - centroids, axis=1).max()))
    return OracleCheck(
        f"WTA vs cluster means, seed {seed}", worst, MAX_CENTROID_DISTANCE, time.perf_counter() - start
    )


def verify_oracle(seeds=(0, 1, 2)) -> list[OracleCheck]:
    checks = [hpca_vs_pca(seeds[0])] + [wta_vs_centroids(seed) for seed in seeds]
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status} {check.name}: {check.value:.4f} (< {check.threshold}) in {check.seconds:.2f}s")
    return checks
