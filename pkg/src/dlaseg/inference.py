"""Whole-volume prediction, ensemble averaging and small-cluster removal.

Volumes are segmented slice by slice with overlap-averaged axial tiles.
Ensembles average member probability volumes voxel-wise. Post-processing
removes connected whole-tumor components smaller than a threshold derived
from training-set statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autograd import Tensor
from .data import Volume, brain_mask, normalize
from .network import CascadeNet

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class EnsembleConfig:
    """Seed-varied members combined by voxel-wise probability mean."""
    member_paths: tuple = ()
    folds: int = 5
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass
class PostprocConfig:
    min_cluster_voxels: int = 1
    connectivity: int = 26

    def __post_init__(self):
        if self.min_cluster_voxels < 1:
            raise ValueError("min_cluster_voxels must be >= 1")
        if self.connectivity not in _CONNECTIVITY_RANK:
            raise ValueError("connectivity must be 6, 18 or 26")


def _tile_offsets(extent: int, patch: int, stride: int) -> list:
    offsets = list(range(0, extent - patch + 1, stride))
    if offsets[-1] != extent - patch:
        offsets.append(extent - patch)
    return offsets


def stitch_probabilities(tiles, offsets, out_shape) -> np.ndarray:
    """Average per-tile probability patches into a (K, H, W) plane.

    tiles: sequence of (K, p, p) arrays aligned with offsets (h0, w0).
    The accumulation order is fixed by the given sequence order; uniform
    averaging makes the result independent of that order up to rounding.
    """
    acc = np.zeros(out_shape, dtype=np.float64)
    count = np.zeros(out_shape[1:], dtype=np.float64)
    for tile, (h0, w0) in zip(tiles, offsets):
        p = tile.shape[1]
        acc[:, h0:h0 + p, w0:w0 + p] += tile
        count[h0:h0 + p, w0:w0 + p] += 1.0
    return acc / count[None]


def _valid_patch_extent(net: CascadeNet, h: int, w: int,
                        patch_extent) -> int:
    factor = 1 << (net.num_scales - 1)
    if patch_extent is None:
        patch_extent = min(h, w) - (min(h, w) % factor)
    if patch_extent < factor or patch_extent % factor:
        raise ValueError(f"patch extent {patch_extent} must be a positive "
                         f"multiple of {factor}")
    if patch_extent > h or patch_extent > w:
        raise ValueError(f"patch extent {patch_extent} exceeds in-plane "
                         f"extents {h}x{w}")
    return patch_extent


def predict_volume(vol: Volume, net: CascadeNet, patch_extent: int = None,
                   stride: int = None, slice_batch: int = 8) -> np.ndarray:
    """Final-stage probability volume (K, D, H, W) for one normalized-on-
    the-fly volume, tiled per axial slice with overlap averaging."""
    if vol.num_channels != net.in_channels:
        raise ValueError(f"volume has {vol.num_channels} channels, net "
                         f"expects {net.in_channels}")
    vol = normalize(vol)
    c, d, h, w = vol.channels.shape
    patch = _valid_patch_extent(net, h, w, patch_extent)
    stride = stride or patch
    offsets = [(h0, w0) for h0 in _tile_offsets(h, patch, stride)
               for w0 in _tile_offsets(w, patch, stride)]
    k = net.num_classes
    probs = np.empty((k, d, h, w), dtype=np.float64)
    for start in range(0, d, slice_batch):
        slices = list(range(start, min(start + slice_batch, d)))
        batch = np.stack([
            vol.channels[:, z, h0:h0 + patch, w0:w0 + patch]
            for z in slices for h0, w0 in offsets]).astype(net.dtype)
        outputs = net.forward(Tensor(batch), training=False, rng=None)
        stage3 = outputs[-1][1].data
        per_slice = stage3.reshape(len(slices), len(offsets), k, patch, patch)
        for i, z in enumerate(slices):
            probs[:, z] = stitch_probabilities(per_slice[i], offsets,
                                               (k, h, w))
    return probs


def ensemble_predict(vol: Volume, members, patch_extent: int = None,
                     stride: int = None) -> np.ndarray:
    """Voxel-wise arithmetic mean of member probability volumes."""
    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one member")
    first = members[0]
    for m in members[1:]:
        if (m.num_classes != first.num_classes
                or m.in_channels != first.in_channels):
            raise ValueError("ensemble members disagree on classes/channels")
    stacked = np.stack([predict_volume(vol, m, patch_extent, stride)
                        for m in members])
    return stacked.mean(axis=0)


def labels_from_probs(probs: np.ndarray, brain: np.ndarray = None
                      ) -> np.ndarray:
    """Argmax labels; a brain mask, when given, forces the background
    class outside it (the loss never constrains non-brain voxels)."""
    labels = probs.argmax(axis=0).astype(np.uint8)
    if brain is not None:
        labels[~brain] = 0
    return labels


def connected_components(mask: np.ndarray, connectivity: int = 26):
    """Label 3-d connected components of a binary mask; returns
    (component_ids, count)."""
    structure = ndimage.generate_binary_structure(
        3, _CONNECTIVITY_RANK[connectivity])
    return ndimage.label(mask, structure=structure)


def postprocess(labels: np.ndarray, cfg: PostprocConfig) -> np.ndarray:
    """Remove whole-tumor connected components smaller than the threshold;
    surviving voxels keep their class labels."""
    labels = np.asarray(labels)
    out = labels.copy()
    tumor = labels > 0
    if not tumor.any():
        return out
    comp, n = connected_components(tumor, cfg.connectivity)
    if n == 0:
        return out
    sizes = np.bincount(comp.ravel())
    small = np.flatnonzero(sizes < cfg.min_cluster_voxels)
    small = small[small > 0]  # id 0 is background
    if small.size:
        out[np.isin(comp, small)] = 0
    return out


def component_sizes(labels: np.ndarray, connectivity: int = 26) -> np.ndarray:
    tumor = np.asarray(labels) > 0
    comp, n = connected_components(tumor, connectivity)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return np.bincount(comp.ravel())[1:]


def derive_threshold(training_volumes, percentile: float = 5.0,
                     connectivity: int = 26) -> int:
    """Cluster-size threshold from training-set statistics: a low
    percentile of whole-tumor component sizes, floored at 1."""
    sizes = []
    for vol in training_volumes:
        labels = vol.labels if isinstance(vol, Volume) else np.asarray(vol)
        sizes.extend(component_sizes(labels, connectivity).tolist())
    if not sizes:
        raise ValueError("no tumor components in the training volumes")
    return max(1, int(np.floor(np.percentile(np.asarray(sizes), percentile))))


def segment_volume(vol: Volume, members, postproc: PostprocConfig = None,
                   patch_extent: int = None) -> np.ndarray:
    """Full pipeline for one volume: ensemble probabilities, brain-masked
    argmax labels, then optional small-cluster removal."""
    probs = ensemble_predict(vol, members, patch_extent)
    labels = labels_from_probs(probs, brain_mask(vol.channels))
    if postproc is not None:
        labels = postprocess(labels, postproc)
    return labels
