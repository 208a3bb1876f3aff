"""Behavior decoding: the per-skill conditioned policy and its ablations.

The main policy maps (state, executable-skill embedding, hidden context) to
an action and is behavior-cloned from the expert dataset. Ablation variants
swap the executable-skill conditioning for progressively rawer prompt
representations (whole plan / language pooled / video pooled / raw prompt).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .context import FACTORS, MAGNITUDES, ExecutableSkill, OnlineContextEncoder, batch_history_features
from .encoders import SkillInstruction, VideoSkillEncoder, video_windows
from .errors import UnknownSkillError, ValidationError
from .nets import mlp
from .prompts import TaskPrompt
from .world import Trajectory

VARIANTS = ("full", "t", "l", "v", "n")
RAW_PROMPT_DIM = 32
_RAW_PROJ_SEED = 1013904223  # fixed: raw-prompt featurization is untrained by design


def factor_index(f: str) -> int:
    return FACTORS.index(f)


def magnitude_index(d: str) -> int:
    return MAGNITUDES.index(d)


def executable_embedding(
    triple: ExecutableSkill, label_embs: torch.Tensor
) -> torch.Tensor:
    """Skill label embedding concatenated with factor/magnitude one-hots."""
    if not (0 <= triple.z < label_embs.shape[0]):
        raise UnknownSkillError(f"skill id {triple.z} outside label space")
    f_oh = F.one_hot(torch.tensor(factor_index(triple.f_z)), len(FACTORS)).float()
    d_oh = F.one_hot(torch.tensor(magnitude_index(triple.d_z)), len(MAGNITUDES)).float()
    return torch.cat([label_embs[triple.z], f_oh, d_oh])


def assign_instructed_factor(context, seed: int) -> tuple[str, str]:
    """Which factor a trajectory's prompt instructs.

    Non-breeze winds and non-normal speeds are always instructed; the
    (breeze, normal) base cell alternates between a breeze-wind clause and
    no clause at all, so the policy sees both encodings of the same
    behavior.
    """
    if context.wind_level in ("gust", "flurry"):
        return "wind", context.wind_level
    if context.speed_level in ("slow", "fast"):
        return "speed", context.speed_level
    if seed % 2 == 0:
        return "wind", "breeze"
    return "none", "none"


class BehaviorDecoder(nn.Module):
    """Per-skill conditioned policy head."""

    def __init__(
        self,
        state_dim: int,
        skill_emb_dim: int = 64,
        code_dim: int = 16,
        width: int = 128,
        depth: int = 4,
        use_hidden_ctx: bool = True,
    ):
        super().__init__()
        self.use_hidden_ctx = use_hidden_ctx
        self.code_dim = code_dim
        in_dim = state_dim + skill_emb_dim + len(FACTORS) + len(MAGNITUDES)
        if use_hidden_ctx:
            in_dim += code_dim
        self.net = mlp([in_dim] + [width] * depth + [4], activation=nn.LeakyReLU, layer_norm=True)

    def forward(self, s: torch.Tensor, zbar: torch.Tensor, h: torch.Tensor | None) -> torch.Tensor:
        parts = [s, zbar]
        if self.use_hidden_ctx:
            if h is None:
                raise ValidationError("policy expects a hidden context")
            parts.append(h)
        return self.net(torch.cat(parts, dim=-1))


def decode_action(
    policy: BehaviorDecoder,
    s: np.ndarray,
    triple: ExecutableSkill,
    h: np.ndarray | None,
    label_embs: torch.Tensor,
) -> np.ndarray:
    with torch.no_grad():
        zbar = executable_embedding(triple, label_embs)[None]
        hv = None
        if policy.use_hidden_ctx:
            hv = torch.as_tensor(h, dtype=torch.float32)[None]
        a = policy(torch.as_tensor(s, dtype=torch.float32)[None], zbar, hv)
    return a[0].numpy()


class ConditionedPolicy(nn.Module):
    """Ablation policy conditioned on a fixed-size prompt representation."""

    def __init__(self, state_dim: int, cond_dim: int, code_dim: int = 16, width: int = 128, depth: int = 4):
        super().__init__()
        self.cond_dim = cond_dim
        self.net = mlp(
            [state_dim + cond_dim + code_dim] + [width] * depth + [4],
            activation=nn.LeakyReLU,
            layer_norm=True,
        )

    def forward(self, s: torch.Tensor, cond: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([s, cond, h], dim=-1))


def _raw_projections(obs_dim: int, state_dim: int, vocab_size: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(_RAW_PROJ_SEED)
    return {
        "video": rng.normal(0, 1 / np.sqrt(obs_dim), (obs_dim, RAW_PROMPT_DIM)),
        "sensor": rng.normal(0, 1 / np.sqrt(state_dim + 4), (state_dim + 4, RAW_PROMPT_DIM)),
        "text": rng.normal(0, 1 / np.sqrt(vocab_size), (vocab_size, RAW_PROMPT_DIM)),
    }


def raw_prompt_embedding(prompt: TaskPrompt, vocab, obs_dim: int, state_dim: int) -> np.ndarray:
    """Untrained pooled featurization of the raw multi-modal snippets."""
    proj = _raw_projections(obs_dim, state_dim, len(vocab))
    vecs = []
    for snippet in prompt.snippets:
        if snippet.modality == "video":
            vecs.append(snippet.payload.mean(axis=0) @ proj["video"])
        elif snippet.modality == "sensor":
            states, actions = snippet.payload
            feat = np.concatenate([states.mean(axis=0), actions.mean(axis=0)])
            vecs.append(feat @ proj["sensor"])
        else:
            from .vocab import tokenize

            bow = np.zeros(len(vocab))
            for tid in vocab.encode(tokenize(snippet.payload)):
                bow[tid] += 1.0
            vecs.append(bow @ proj["text"])
    return np.mean(vecs, axis=0).astype(np.float32)


def video_space_embedding(prompt: TaskPrompt, video_model: VideoSkillEncoder) -> np.ndarray:
    """Mean pooled video-side embeddings of the demonstration snippets."""
    embs = []
    with torch.no_grad():
        for snippet in prompt.snippets:
            if snippet.modality != "video":
                continue
            wins = video_windows(snippet.payload, video_model.window)
            embs.append(video_model.embed_videos(torch.as_tensor(wins)).mean(dim=0))
    if not embs:
        return np.zeros(video_model.emb_dim, dtype=np.float32)
    return torch.stack(embs).mean(dim=0).numpy()


def language_space_embedding(
    instruction: SkillInstruction, video_model: VideoSkillEncoder
) -> np.ndarray:
    """Pooled label-space embedding of the whole instruction."""
    with torch.no_grad():
        return video_model.embed_tokens(instruction.tokens).numpy()


def plan_embedding(
    triples: list[ExecutableSkill], label_embs: torch.Tensor, max_slots: int = 7
) -> np.ndarray:
    """Order-preserving concatenation of executable-skill embeddings."""
    slot = label_embs.shape[1] + len(FACTORS) + len(MAGNITUDES)
    out = np.zeros(max_slots * slot, dtype=np.float32)
    for i, triple in enumerate(triples[:max_slots]):
        out[i * slot : (i + 1) * slot] = executable_embedding(triple, label_embs).numpy()
    return out


def plan_embedding_dim(label_emb_dim: int = 64, max_slots: int = 7) -> int:
    return max_slots * (label_emb_dim + len(FACTORS) + len(MAGNITUDES))


def bc_arrays(
    trajectories: list[Trajectory],
    label_embs: torch.Tensor,
    online_encoder: OnlineContextEncoder,
) -> dict[str, torch.Tensor]:
    """Flatten a dataset into per-timestep behavior-cloning tensors.

    The hidden context is computed by the frozen online encoder over the
    same padded history windows the rollout loop will see.
    """
    s_rows, z_rows, f_rows, d_rows, a_rows, h_rows, traj_idx = [], [], [], [], [], [], []
    online_encoder.eval()
    with torch.no_grad():
        for ti, traj in enumerate(trajectories):
            factor, magnitude = assign_instructed_factor(traj.context, traj.seed)
            feats = torch.as_tensor(batch_history_features(traj, online_encoder.window))
            q, _, _, _ = online_encoder(feats)
            for t in range(len(traj)):
                s_rows.append(traj.states[t])
                z_rows.append(int(traj.labels[t]))
                f_rows.append(factor_index(factor))
                d_rows.append(magnitude_index(magnitude))
                a_rows.append(traj.actions[t])
                traj_idx.append(ti)
            h_rows.append(q)
    return {
        "s": torch.as_tensor(np.asarray(s_rows), dtype=torch.float32),
        "z": torch.tensor(z_rows, dtype=torch.long),
        "f": torch.tensor(f_rows, dtype=torch.long),
        "d": torch.tensor(d_rows, dtype=torch.long),
        "a": torch.as_tensor(np.asarray(a_rows), dtype=torch.float32),
        "h": torch.cat(h_rows),
        "traj": torch.tensor(traj_idx, dtype=torch.long),
        "label_embs": label_embs,
    }


def _zbar_batch(arrays: dict[str, torch.Tensor], idx: torch.Tensor) -> torch.Tensor:
    z_emb = arrays["label_embs"][arrays["z"][idx]]
    f_oh = F.one_hot(arrays["f"][idx], len(FACTORS)).float()
    d_oh = F.one_hot(arrays["d"][idx], len(MAGNITUDES)).float()
    return torch.cat([z_emb, f_oh, d_oh], dim=-1)


def train_behavior_decoder(
    policy: BehaviorDecoder,
    arrays: dict[str, torch.Tensor],
    steps: int = 3000,
    batch_size: int = 256,
    lr: float = 1e-4,
    seed: int = 0,
) -> float:
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    policy.train()
    n = len(arrays["a"])
    last = float("nan")
    for _ in range(steps):
        idx = torch.as_tensor(rng.integers(n, size=min(batch_size, n)))
        h = arrays["h"][idx] if policy.use_hidden_ctx else None
        pred = policy(arrays["s"][idx], _zbar_batch(arrays, idx), h)
        loss = F.mse_loss(pred, arrays["a"][idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
    policy.eval()
    return last


def behavior_mse(policy: BehaviorDecoder, arrays: dict[str, torch.Tensor]) -> float:
    with torch.no_grad():
        total, n = 0.0, len(arrays["a"])
        for i in range(0, n, 4096):
            idx = torch.arange(i, min(i + 4096, n))
            h = arrays["h"][idx] if policy.use_hidden_ctx else None
            pred = policy(arrays["s"][idx], _zbar_batch(arrays, idx), h)
            total += float(((pred - arrays["a"][idx]) ** 2).mean(dim=-1).sum())
    return total / n


def train_conditioned_policy(
    policy: ConditionedPolicy,
    arrays: dict[str, torch.Tensor],
    cond_per_traj: torch.Tensor,
    steps: int = 3000,
    batch_size: int = 256,
    lr: float = 1e-4,
    seed: int = 0,
) -> float:
    """Same cloning loss, conditioning on a per-trajectory prompt embedding."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    policy.train()
    n = len(arrays["a"])
    last = float("nan")
    for _ in range(steps):
        idx = torch.as_tensor(rng.integers(n, size=min(batch_size, n)))
        cond = cond_per_traj[arrays["traj"][idx]]
        pred = policy(arrays["s"][idx], cond, arrays["h"][idx])
        loss = F.mse_loss(pred, arrays["a"][idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
    policy.eval()
    return last
