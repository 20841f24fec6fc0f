"""
Search Policy Module
This module learns and serves the semantic search distribution over ground-plane map
columns: the Gaussian-mixture expert, the convolutional policy with its maximum-likelihood
trainer and checkpoint format, and feasibility-filtered goal sampling with a uniform
baseline mode.
"""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp
from torch import nn
from torch.utils.data import DataLoader, Dataset

from config import HYPERPARAMETERS, InputError, RoomShuffleError
from geometry import GridSpec
from planner import NavGraph
from semantic_map import SemanticMap, load_map, save_map

logger = logging.getLogger(__name__)

UNIFORM = 'uniform'

CHECKPOINT_MAGIC = b'SPOL1\x00'
CHECKPOINT_VERSION = 1
# magic, version, in_channels, hidden, layers, kernel, H, W, D, C
_CHECKPOINT_HEADER = struct.Struct('<6sHIIIIIIII')

EXPERTS_INDEX = 'experts.json'


class BoxedInError(RoomShuffleError):
    """Raised when no navigation cell is reachable from the agent."""


class CheckpointFormatError(RoomShuffleError):
    """Raised when a policy checkpoint cannot be decoded; `offset` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ExpertDistribution:
    modes: np.ndarray
    sigma: float = 0.75

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.float64).reshape(-1, 3)
        if len(modes) < 1:
            raise InputError("expert distribution needs at least one mode")
        if self.sigma <= 0:
            raise InputError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, 'modes', modes)
        object.__setattr__(self, 'sigma', float(self.sigma))

    @property
    def num_modes(self) -> int:
        return len(self.modes)


def expert_density(x, expert: ExpertDistribution) -> Union[float, np.ndarray]:
    """
    Equal-weight mixture of isotropic 3-D Gaussians, one per mode.

    Args:
        x: A 3-vector or an (N, 3) array of points
        expert: Mixture modes and shared standard deviation

    Returns:
        Density at each point (a float for a single point)
    """
    points = np.asarray(x, dtype=np.float64)
    single = points.ndim == 1
    points = points.reshape(-1, 3)
    sq = ((points[:, None, :] - expert.modes[None, :, :]) ** 2).sum(axis=-1)
    norm = (2.0 * math.pi * expert.sigma ** 2) ** -1.5
    density = norm * np.exp(-sq / (2.0 * expert.sigma ** 2)).mean(axis=1)
    return float(density[0]) if single else density


def discretize_expert(expert: ExpertDistribution, grid: GridSpec) -> np.ndarray:
    """
    Per-column training target: the mixture evaluated at every column center at the
    height of each mode, summed per column and normalized over the ground plane.

    Returns:
        (H, W) float64 table summing to 1
    """
    centers = grid.column_centers().reshape(-1, 2)
    modes = expert.modes
    planar = ((centers[:, None, :] - modes[None, :, :2]) ** 2).sum(axis=-1)         # (N, K)
    vertical = (modes[:, None, 2] - modes[None, :, 2]) ** 2                          # (K heights, K modes)
    sq = planar[:, None, :] + vertical[None, :, :]                                   # (N, heights, modes)
    log_column = logsumexp(-sq / (2.0 * expert.sigma ** 2), axis=(1, 2))
    log_column -= logsumexp(log_column)
    return np.exp(log_column).reshape(grid.dims[:2])


class SearchPolicy(nn.Module):
    """Stack of same-padded 2-D convolutions mapping a flattened map to per-column logits."""

    def __init__(self, in_channels: int, hidden: int = None, layers: int = None,
                 kernel: int = None, grid_dims: Optional[Tuple[int, int, int, int]] = None):
        super().__init__()
        hidden = HYPERPARAMETERS['policy_hidden'] if hidden is None else hidden
        layers = HYPERPARAMETERS['policy_layers'] if layers is None else layers
        kernel = HYPERPARAMETERS['policy_kernel'] if kernel is None else kernel
        if layers < 1 or hidden < 1 or kernel < 1 or kernel % 2 == 0:
            raise InputError(f"invalid policy architecture: layers={layers} hidden={hidden} kernel={kernel}")
        self.in_channels = int(in_channels)
        self.hidden = int(hidden)
        self.kernel = int(kernel)
        self.grid_dims = tuple(grid_dims) if grid_dims is not None else None

        widths = [self.in_channels] + [self.hidden] * (layers - 1) + [1]
        self.convs = nn.ModuleList(
            nn.Conv2d(w_in, w_out, self.kernel, padding=self.kernel // 2)
            for w_in, w_out in zip(widths[:-1], widths[1:])
        )
        self.activations = nn.ModuleList(nn.ReLU() for _ in range(layers - 1))

    @property
    def num_layers(self) -> int:
        return len(self.convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv, act in zip(self.convs[:-1], self.activations):
            x = act(conv(x))
        return self.convs[-1](x).squeeze(1)


def map_to_tensor(semantic_map: SemanticMap, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Flatten the height and class axes of an (H, W, D, C) map into (D*C, H, W) channels."""
    h, w = semantic_map.grid.dims[:2]
    flat = np.asarray(semantic_map.probs).reshape(h, w, -1)
    return torch.from_numpy(np.ascontiguousarray(flat.transpose(2, 0, 1))).to(dtype)


def _check_dims(policy: SearchPolicy, grid: GridSpec) -> None:
    if policy.grid_dims is not None and tuple(policy.grid_dims) != grid.shape:
        raise InputError(f"policy was trained on grid {policy.grid_dims}, map is {grid.shape}")
    channels = grid.dims[2] * grid.num_classes
    if channels != policy.in_channels:
        raise InputError(f"policy expects {policy.in_channels} input channels, map provides {channels}")


def policy_forward(policy: SearchPolicy, semantic_map: SemanticMap) -> np.ndarray:
    """Per-column logits (H, W) for one map."""
    _check_dims(policy, semantic_map.grid)
    param = next(policy.parameters())
    with torch.no_grad():
        logits = policy(map_to_tensor(semantic_map, param.dtype).unsqueeze(0))[0]
    return logits.cpu().numpy().astype(np.float64)


def column_distribution(logits: np.ndarray) -> np.ndarray:
    """Softmax over all columns of a logit table."""
    flat = np.asarray(logits, dtype=np.float64).reshape(-1)
    flat = np.exp(flat - logsumexp(flat))
    return (flat / flat.sum()).reshape(np.shape(logits))


def expert_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the cross-entropy between column targets and softmax(logits)."""
    log_probs = F.log_softmax(logits.flatten(1), dim=1)
    return -(targets.flatten(1) * log_probs).sum(dim=1).mean()


class MapSnapshotDataset(Dataset):
    """
    Lazily loaded (map snapshot, expert) pairs stored as SMAP1 files plus an index file.

    The index holds the expert sigma and, per snapshot, its file name and mode list.
    """

    def __init__(self, directory: str):
        self.directory = directory
        index_path = os.path.join(directory, EXPERTS_INDEX)
        if not os.path.exists(index_path):
            raise InputError(f"no {EXPERTS_INDEX} in dataset directory {directory}")
        with open(index_path) as f:
            index = json.load(f)
        self.sigma = float(index.get('sigma', HYPERPARAMETERS['expert_sigma']))
        self.entries = index.get('snapshots', [])

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, item: int) -> Tuple[SemanticMap, ExpertDistribution]:
        entry = self.entries[item]
        semantic_map = load_map(os.path.join(self.directory, entry['file']))
        return semantic_map, ExpertDistribution(np.array(entry['modes']), self.sigma)


def write_snapshot_dataset(directory: str, pairs: Sequence[Tuple[SemanticMap, ExpertDistribution]],
                           start_index: int = 0) -> int:
    """Append (map, expert) pairs to a snapshot dataset directory; returns the new size."""
    os.makedirs(directory, exist_ok=True)
    index_path = os.path.join(directory, EXPERTS_INDEX)
    index = {'sigma': HYPERPARAMETERS['expert_sigma'], 'snapshots': []}
    if os.path.exists(index_path):
        with open(index_path) as f:
            index = json.load(f)
    for offset, (semantic_map, expert) in enumerate(pairs):
        name = f"map_{start_index + offset:05d}.smap"
        save_map(semantic_map, os.path.join(directory, name))
        index['sigma'] = expert.sigma
        index['snapshots'].append({'file': name, 'modes': expert.modes.tolist()})
    with open(index_path, 'w') as f:
        json.dump(index, f, indent=1, sort_keys=True)
    return len(index['snapshots'])


class _TrainingView(Dataset):
    """Turns (map, expert) pairs into (input tensor, target tensor) training items."""

    def __init__(self, pairs, dtype: torch.dtype):
        self.pairs = pairs
        self.dtype = dtype
        self.grid_shape = None

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, item: int):
        semantic_map, expert = self.pairs[item]
        if self.grid_shape is None:
            self.grid_shape = semantic_map.grid.shape
        elif semantic_map.grid.shape != self.grid_shape:
            raise InputError(f"dataset item {item} has grid {semantic_map.grid.shape}, expected {self.grid_shape}")
        target = torch.from_numpy(discretize_expert(expert, semantic_map.grid)).to(self.dtype)
        return map_to_tensor(semantic_map, self.dtype), target


def _dataset_loss(policy: SearchPolicy, loader: DataLoader) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for inputs, targets in loader:
            total += float(expert_cross_entropy(policy(inputs), targets)) * len(inputs)
            count += len(inputs)
    return total / count


def train_policy(dataset, lr: float = None, batch_size: int = None, epochs: int = None,
                 seed: int = 0, hidden: int = None, layers: int = None, kernel: int = None,
                 dtype: torch.dtype = torch.float32) -> Tuple[SearchPolicy, Dict[str, object]]:
    """
    Fit the search policy to expert targets by maximum likelihood with Adam.

    The parameters with the lowest full-dataset loss seen (initial parameters included)
    are returned, so the final loss never exceeds the initial one.

    Args:
        dataset: Sequence of (SemanticMap, ExpertDistribution) pairs, e.g. a MapSnapshotDataset
        lr: Learning rate (default 3e-4)
        batch_size: Maps per step (default 8)
        epochs: Passes over the dataset (default 15)
        seed: Seeds parameter init and shuffling
        hidden, layers, kernel: Architecture overrides
        dtype: Parameter dtype

    Returns:
        (policy, history) where history holds initial_loss, epoch_losses, step_losses and final_loss
    """
    if len(dataset) == 0:
        raise InputError("cannot train the search policy on an empty dataset")
    lr = HYPERPARAMETERS['learning_rate'] if lr is None else lr
    batch_size = HYPERPARAMETERS['batch_size'] if batch_size is None else batch_size
    epochs = HYPERPARAMETERS['epochs'] if epochs is None else epochs

    first_map, _ = dataset[0]
    grid = first_map.grid
    torch.manual_seed(seed)
    policy = SearchPolicy(grid.dims[2] * grid.num_classes, hidden, layers, kernel, grid.shape).to(dtype)

    view = _TrainingView(dataset, dtype)
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(view, batch_size=batch_size, shuffle=True, generator=generator)
    eval_loader = DataLoader(view, batch_size=batch_size, shuffle=False)
    optimizer = torch.optim.Adam(policy.parameters(), lr=lr)

    initial_loss = _dataset_loss(policy, eval_loader)
    best_loss = initial_loss
    best_state = {k: v.clone() for k, v in policy.state_dict().items()}
    history = {'initial_loss': initial_loss, 'epoch_losses': [], 'step_losses': []}
    logger.info("training search policy on %d maps, initial loss %.4f", len(dataset), initial_loss)

    for epoch in range(epochs):
        for inputs, targets in loader:
            optimizer.zero_grad()
            loss = expert_cross_entropy(policy(inputs), targets)
            loss.backward()
            optimizer.step()
            history['step_losses'].append(float(loss))
        epoch_loss = _dataset_loss(policy, eval_loader)
        history['epoch_losses'].append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_state = {k: v.clone() for k, v in policy.state_dict().items()}
        logger.debug("epoch %d loss %.4f", epoch + 1, epoch_loss)

    policy.load_state_dict(best_state)
    policy.eval()
    history['final_loss'] = best_loss
    logger.info("search policy trained: loss %.4f -> %.4f", initial_loss, best_loss)
    return policy, history


def mode_log_likelihood(policy: Union[SearchPolicy, str], semantic_map: SemanticMap,
                        expert: ExpertDistribution) -> float:
    """Mean log-probability the policy assigns to the columns holding the expert modes."""
    h, w = semantic_map.grid.dims[:2]
    if isinstance(policy, str):
        log_probs = np.full((h, w), -math.log(h * w))
    else:
        logits = policy_forward(policy, semantic_map).reshape(-1)
        log_probs = (logits - logsumexp(logits)).reshape(h, w)
    cols = semantic_map.grid.voxel_index(expert.modes)[:, :2]
    cols = np.clip(cols, 0, [h - 1, w - 1])
    return float(log_probs[cols[:, 0], cols[:, 1]].mean())


def _column_masks(nav: NavGraph, start_cell, dims: Tuple[int, int]):
    rows, cols = nav.shape
    reachable = np.zeros((rows, cols), dtype=bool)
    for cell in nav.reachable_from(start_cell):
        reachable[cell] = True
    if not reachable.any():
        raise BoxedInError(f"no navigation cell is reachable from {tuple(start_cell)}")

    def lift(cells: np.ndarray) -> np.ndarray:
        columns = np.zeros(dims, dtype=bool)
        expanded = np.repeat(np.repeat(cells, nav.cell_voxels, axis=0), nav.cell_voxels, axis=1)
        columns[:expanded.shape[0], :expanded.shape[1]] = expanded
        return columns

    return lift(nav.free), lift(reachable)


def sample_goal(policy: Union[SearchPolicy, str, np.ndarray], semantic_map: SemanticMap,
                nav: NavGraph, start_cell, rng: np.random.Generator,
                retries: int = None) -> np.ndarray:
    """
    Sample a feasible navigation goal at ground height.

    Columns are drawn from softmax(policy logits), or uniformly over free columns when
    policy is 'uniform'. A draw is kept only when its own navigation cell is reachable
    from the agent. After `retries` rejections the reachable column nearest to the last
    draw is returned.

    Args:
        policy: SearchPolicy, the string 'uniform', or a precomputed (H, W) logit table
        semantic_map: Current map
        nav: Navigation graph built from the same map
        start_cell: Agent's navigation cell
        rng: Random generator of the episode
        retries: Rejection-sampling attempts (default 64)

    Returns:
        World-coordinate goal [x, y, 0]
    """
    retries = HYPERPARAMETERS['goal_retries'] if retries is None else retries
    grid = semantic_map.grid
    dims = grid.dims[:2]
    free_cols, reachable_cols = _column_masks(nav, start_cell, dims)

    if isinstance(policy, str):
        if policy != UNIFORM:
            raise InputError(f"unknown search mode {policy!r}")
        probs = free_cols.reshape(-1).astype(np.float64)
        probs /= probs.sum()
    else:
        logits = policy if isinstance(policy, np.ndarray) else policy_forward(policy, semantic_map)
        if logits.shape != dims:
            raise InputError(f"logit table {logits.shape} does not match map columns {dims}")
        probs = column_distribution(logits).reshape(-1)

    reachable_flat = reachable_cols.reshape(-1)
    draw = None
    for _ in range(max(retries, 1)):
        draw = int(rng.choice(len(probs), p=probs))
        if reachable_flat[draw]:
            return _column_goal(grid, draw)

    logger.debug("goal sampling fell back to the nearest reachable column after %d draws", retries)
    centers = grid.column_centers().reshape(-1, 2)
    candidates = np.flatnonzero(reachable_flat)
    dist = np.linalg.norm(centers[candidates] - centers[draw], axis=1)
    return _column_goal(grid, int(candidates[int(np.argmin(dist))]))


def _column_goal(grid: GridSpec, flat_column: int) -> np.ndarray:
    i, j = np.unravel_index(flat_column, grid.dims[:2])
    x = grid.origin[0] + (i + 0.5) * grid.voxel_size
    y = grid.origin[1] + (j + 0.5) * grid.voxel_size
    return np.array([x, y, 0.0])


def save_policy(policy: SearchPolicy, path: str) -> None:
    """Write an SPOL1 checkpoint: header, then float32 weights and bias of each layer in order."""
    if policy.grid_dims is None:
        raise InputError("policy has no grid dims to record in the checkpoint")
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, policy.in_channels,
                                     policy.hidden, policy.num_layers, policy.kernel, *policy.grid_dims)
    with open(path, 'wb') as f:
        f.write(header)
        for conv in policy.convs:
            f.write(conv.weight.detach().cpu().numpy().astype('<f4').tobytes())
            f.write(conv.bias.detach().cpu().numpy().astype('<f4').tobytes())
    logger.debug("saved search policy checkpoint %s", path)


def load_policy(path: str) -> SearchPolicy:
    with open(path, 'rb') as f:
        data = f.read()
    return decode_policy(data)


def decode_policy(data: bytes) -> SearchPolicy:
    """Rebuild a SearchPolicy from SPOL1 checkpoint bytes."""
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes, not an SPOL1 checkpoint", 0)
    if len(data) < _CHECKPOINT_HEADER.size:
        raise CheckpointFormatError("truncated header", len(data))
    _, version, in_ch, hidden, layers, kernel, h, w, d, c = _CHECKPOINT_HEADER.unpack_from(data, 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", len(CHECKPOINT_MAGIC))
    if in_ch != d * c or min(hidden, layers, kernel, h, w, d, c) < 1 or kernel % 2 == 0:
        raise CheckpointFormatError(
            f"invalid architecture in={in_ch} hidden={hidden} layers={layers} kernel={kernel} "
            f"grid={h}x{w}x{d}x{c}", len(CHECKPOINT_MAGIC) + 2)

    policy = SearchPolicy(in_ch, hidden, layers, kernel, (h, w, d, c))
    offset = _CHECKPOINT_HEADER.size
    state = {}
    for k, conv in enumerate(policy.convs):
        for name in ('weight', 'bias'):
            shape = tuple(getattr(conv, name).shape)
            size = int(np.prod(shape)) * 4
            if offset + size > len(data):
                raise CheckpointFormatError(f"truncated {name} of layer {k}", offset)
            blob = np.frombuffer(data, dtype='<f4', count=size // 4, offset=offset).reshape(shape)
            if not np.all(np.isfinite(blob)):
                raise CheckpointFormatError(f"non-finite {name} in layer {k}", offset)
            state[f'convs.{k}.{name}'] = torch.from_numpy(blob.astype(np.float32))
            offset += size
    if offset != len(data):
        raise CheckpointFormatError("trailing bytes after the last layer", offset)
    policy.load_state_dict(state)
    policy.eval()
    return policy
