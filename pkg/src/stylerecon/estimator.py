"""Scikit-learn style facade over the training loop and the reconstruction network."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import data, evaluation, training
from .geometry import Mesh
from .losses import LossWeights


def check_images(X, image_size: int | None = None) -> torch.Tensor:
    """Coerce images to a float32 ``(N, 4, H, W)`` tensor.

    Accepts ``(N, H, W, 3)`` / ``(N, H, W, 4)`` arrays in [0, 1] (channels last;
    a missing alpha channel is filled with ones) or ``(N, 4, H, W)`` tensors.
    """
    X = torch.as_tensor(np.asarray(X, dtype=np.float32) if not torch.is_tensor(X) else X,
                        dtype=torch.float32)
    if X.dim() == 3:
        X = X[None]
    if X.dim() != 4:
        raise ValueError(f"expected a batch of images, got shape {tuple(X.shape)}")
    if X.shape[1] != 4 and X.shape[-1] in (3, 4):
        if X.shape[-1] == 3:
            X = torch.cat([X, torch.ones_like(X[..., :1])], dim=-1)
        X = X.permute(0, 3, 1, 2)
    if X.shape[1] != 4:
        raise ValueError(f"expected 3 or 4 channels, got shape {tuple(X.shape)}")
    if not torch.isfinite(X).all():
        raise ValueError("images contain NaN or inf")
    if image_size is not None and tuple(X.shape[-2:]) != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images")
    return X.contiguous()


class StyleAgnosticReconstructor(BaseEstimator):
    """Single-view mesh reconstruction trained without silhouettes.

    ``fit`` takes a list of :class:`~stylerecon.data.ObjectRecord` (silhouettes
    and meshes are ignored) or a prepared :class:`~stylerecon.data.TrainingSet`.
    ``predict`` maps images to ``(N, V, 3)`` vertex arrays on the template's
    faces, and ``score`` is the mean voxel IoU against ground-truth meshes.
    """

    def __init__(self, cycles=20, da_iters_per_cycle=1500, recon_iters_per_cycle=2000, batch_size=64,
                 learning_rate=1e-4, style_w=1.0, content_w=400.0, jaccard_delta=0.25,
                 noise_sigma=0.15, huber_threshold=1.0, azimuth_sigma=0.0, brightness_sigma=0.0,
                 seed=0):
        self.cycles = cycles
        self.da_iters_per_cycle = da_iters_per_cycle
        self.recon_iters_per_cycle = recon_iters_per_cycle
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.style_w = style_w
        self.content_w = content_w
        self.jaccard_delta = jaccard_delta
        self.noise_sigma = noise_sigma
        self.huber_threshold = huber_threshold
        self.azimuth_sigma = azimuth_sigma
        self.brightness_sigma = brightness_sigma
        self.seed = seed

    def _config(self) -> training.TrainConfig:
        weights = LossWeights(self.style_w, self.content_w, self.jaccard_delta, self.noise_sigma,
                              self.huber_threshold)
        return training.TrainConfig(self.cycles, self.da_iters_per_cycle, self.recon_iters_per_cycle,
                                    self.batch_size, self.learning_rate, weights, self.seed)

    def fit(self, X, y=None):
        if isinstance(X, data.TrainingSet):
            train_set = X
        else:
            records = list(X)
            if not records or not all(isinstance(r, data.ObjectRecord) for r in records):
                raise TypeError("fit expects ObjectRecords or a TrainingSet")
            perturb = data.PerturbSpec(self.azimuth_sigma, self.brightness_sigma, self.seed)
            train_set = data.build_training_set(records, perturb)
        state = training.run_training(self._config(), train_set)
        self.state_ = state
        self.model_ = state.recon.eval()
        self.image_size_ = train_set.image_size
        self.loss_history_ = list(state.history)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.image_size_)
        with torch.no_grad():
            return self.model_.vertices(images).double().numpy()

    def predict_meshes(self, X) -> list[Mesh]:
        faces = self.model_.template.faces if hasattr(self, "model_") else None
        return [Mesh(v, faces) for v in self.predict(X)]

    def score(self, X, y) -> float:
        """Mean 3D IoU of the reconstructions of ``X`` against meshes ``y``."""
        meshes = list(y)
        verts = self.predict(X)
        if len(meshes) != len(verts):
            raise ValueError("X and y differ in length")
        ious = [evaluation.iou3d(evaluation.voxelize(Mesh(v, self.model_.template.faces)),
                                 evaluation.voxelize(m)) for v, m in zip(verts, meshes)]
        return float(np.mean(ious))
