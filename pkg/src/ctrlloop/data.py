"""In-memory triplet dataset over a rendered multi-view directory.

A triplet is (reference view, relative camera pose, target view + alpha);
any ordered pair of views of the same object is a valid triplet. Images are
kept in storage range [0, 1] as loaded from the PNGs, so training sees
exactly the quantized pixels that live on disk.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .images import image_to_tensor
from .sceneforge import (
    CameraPose,
    DatasetManifest,
    RelativePose,
    load_manifest,
    load_view,
    make_scene,
    relative_pose,
)


@dataclass(frozen=True)
class ViewTriplet:
    reference: np.ndarray  # HxWx3 storage range
    rel_pose: RelativePose
    target: np.ndarray
    target_alpha: np.ndarray
    ref_pose: CameraPose
    tg_pose: CameraPose


@dataclass
class TripletBatch:
    """Stacked triplet tensors; images in storage range [0, 1]."""

    reference: torch.Tensor  # (B, 3, H, W)
    target: torch.Tensor  # (B, 3, H, W)
    target_alpha: torch.Tensor  # (B, H, W)
    rel_pose: torch.Tensor  # (B, 4)

    def __len__(self) -> int:
        return self.reference.shape[0]


class TripletDataset:
    def __init__(self, data_dir: str | Path, dtype: torch.dtype = torch.float32):
        self.data_dir = Path(data_dir)
        self.manifest: DatasetManifest = load_manifest(data_dir)
        self.dtype = dtype
        self._images: list[list[torch.Tensor]] = []
        self._alphas: list[list[torch.Tensor]] = []
        self._poses: list[list[CameraPose]] = []
        for obj in self.manifest.objects:
            imgs, alphas, poses = [], [], []
            for view in obj.views:
                rgb, alpha = load_view(self.data_dir, view)
                imgs.append(image_to_tensor(rgb, dtype))
                alphas.append(torch.from_numpy(alpha).to(dtype))
                poses.append(view.pose())
            self._images.append(imgs)
            self._alphas.append(alphas)
            self._poses.append(poses)

    @property
    def n_objects(self) -> int:
        return len(self._images)

    @property
    def n_views(self) -> int:
        return len(self._images[0])

    @property
    def resolution(self) -> int:
        return self.manifest.resolution

    def scene(self, obj_idx: int):
        return make_scene(self.manifest.objects[obj_idx].object_seed)

    def pose(self, obj_idx: int, view_idx: int) -> CameraPose:
        return self._poses[obj_idx][view_idx]

    def image(self, obj_idx: int, view_idx: int) -> torch.Tensor:
        return self._images[obj_idx][view_idx]

    def alpha(self, obj_idx: int, view_idx: int) -> torch.Tensor:
        return self._alphas[obj_idx][view_idx]

    def triplet(self, obj_idx: int, ref_idx: int, tg_idx: int) -> ViewTriplet:
        ref_pose = self._poses[obj_idx][ref_idx]
        tg_pose = self._poses[obj_idx][tg_idx]
        return ViewTriplet(
            reference=self._images[obj_idx][ref_idx].numpy().transpose(1, 2, 0),
            rel_pose=relative_pose(ref_pose, tg_pose),
            target=self._images[obj_idx][tg_idx].numpy().transpose(1, 2, 0),
            target_alpha=self._alphas[obj_idx][tg_idx].numpy(),
            ref_pose=ref_pose,
            tg_pose=tg_pose,
        )

    def gather_batch(self, pairs: list[tuple[int, int, int]]) -> TripletBatch:
        """Stack triplets for (obj_idx, ref_idx, tg_idx) index triples."""
        refs, tgs, alphas, rels = [], [], [], []
        for obj, ref, tg in pairs:
            refs.append(self._images[obj][ref])
            tgs.append(self._images[obj][tg])
            alphas.append(self._alphas[obj][tg])
            rel = relative_pose(self._poses[obj][ref], self._poses[obj][tg])
            rels.append(torch.from_numpy(rel.as_vector()).to(self.dtype))
        return TripletBatch(
            reference=torch.stack(refs),
            target=torch.stack(tgs),
            target_alpha=torch.stack(alphas),
            rel_pose=torch.stack(rels),
        )

    def draw_batch(self, rng: np.random.Generator, batch_size: int) -> TripletBatch:
        """Uniform random triplets: random object, random ordered view pair."""
        pairs = []
        for _ in range(batch_size):
            obj = int(rng.integers(self.n_objects))
            n = len(self._images[obj])
            ref = int(rng.integers(n))
            tg = int(rng.integers(n - 1))
            if tg >= ref:
                tg += 1
            pairs.append((obj, ref, tg))
        return self.gather_batch(pairs)

    def eval_pairs(self, pair_seed: int) -> list[tuple[int, int, int]]:
        """Deterministic evaluation set: every view once as target, with a
        seeded reference view drawn among the other views of its object."""
        rng = np.random.default_rng(pair_seed)
        pairs = []
        for obj in range(self.n_objects):
            n = len(self._images[obj])
            for tg in range(n):
                ref = int(rng.integers(n - 1))
                if ref >= tg:
                    ref += 1
                pairs.append((obj, ref, tg))
        return pairs
