"""Task-level translation: instruction-to-plan generation and skill boundaries.

The plan generator is a tiny encoder-decoder transformer decoding directly
into skill ids. The boundary detector is a feed-forward head scoring whether
the ongoing skill has terminated, trained with transition labels dilated by
+-J steps.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import SkillInstruction, VideoSkillEncoder, dedup_consecutive, video_windows
from .errors import UnknownSkillError, ValidationError
from .nets import TinySeq2Seq, mlp, train_seq2seq
from .vocab import Vocab
from .world import Trajectory

BOUNDARY_DILATION = 4  # half-width J of the positive-label augmentation


def extract_target_sequence(
    observations: np.ndarray, model: VideoSkillEncoder, stride: int | None = None
) -> list[int]:
    """Per-window retrievals with consecutive duplicates collapsed."""
    if len(observations) == 0:
        raise ValidationError("empty observation stream")
    stride = stride or max(1, model.window // 2)
    wins = video_windows(observations, model.window)
    ends = list(range(min(model.window, len(observations)) - 1, len(observations), stride))
    if ends[-1] != len(observations) - 1:
        ends.append(len(observations) - 1)
    return dedup_consecutive([int(i) for i in model.retrieve_batch(wins[ends])])


class SkillSequenceGenerator:
    """Seq-to-seq translation from instruction tokens to a skill-id plan."""

    N_SPECIALS = 3  # pad, bos, eos in the decoder vocabulary

    def __init__(
        self,
        vocab: Vocab,
        n_skills: int,
        d_model: int = 64,
        ff_dim: int = 32,
        dropout: float = 0.15,
        max_len: int = 96,
    ):
        self.vocab = vocab
        self.n_skills = n_skills
        self.model = TinySeq2Seq(
            src_vocab=len(vocab),
            tgt_vocab=self.N_SPECIALS + n_skills,
            d_model=d_model,
            ff_dim=ff_dim,
            dropout=dropout,
            max_len=max_len,
            pad_id=0,
            bos_id=1,
            eos_id=2,
        )

    def _pair(self, tokens: list[str], target: list[int]) -> tuple[list[int], list[int]]:
        if len(tokens) > self.model.max_len:
            raise ValidationError(f"instruction length {len(tokens)} exceeds maximum")
        return self.vocab.encode(tokens), [self.N_SPECIALS + s for s in target]

    def train(
        self,
        pairs: list[tuple[list[str], list[int]]],
        epochs: int = 12,
        batch_size: int = 3,
        lr: float = 1e-4,
        seed: int = 0,
    ) -> float:
        encoded = [self._pair(tokens, tgt) for tokens, tgt in pairs]
        return train_seq2seq(
            self.model, encoded, epochs, batch_size, lr, np.random.default_rng(seed)
        )

    def generate(self, instruction: SkillInstruction) -> list[int]:
        """Greedy decode; consecutive duplicates collapsed as a safety net."""
        src = self.vocab.encode(instruction.tokens)
        out = self.model.greedy_decode(src)
        plan = [t - self.N_SPECIALS for t in out if t >= self.N_SPECIALS]
        return dedup_consecutive(plan)

    def exact_match(self, pairs: list[tuple[list[str], list[int]]]) -> float:
        hits = 0
        for tokens, target in pairs:
            try:
                hits += int(self.generate(SkillInstruction(tokens)) == list(target))
            except Exception:
                pass
        return hits / len(pairs) if pairs else 0.0


class BoundaryDetector(nn.Module):
    """p(skill terminated | s_t, skill embedding, segment start state)."""

    def __init__(self, state_dim: int, skill_emb_dim: int = 64, width: int = 128, depth: int = 4):
        super().__init__()
        sizes = [state_dim * 2 + skill_emb_dim] + [width] * depth + [1]
        self.net = mlp(sizes, activation=nn.LeakyReLU)

    def forward(self, s: torch.Tensor, z_emb: torch.Tensor, s0: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([s, z_emb, s0], dim=-1))).squeeze(-1)


def boundary_prob(
    detector: BoundaryDetector,
    s: np.ndarray,
    skill_id: int,
    s0: np.ndarray,
    label_embs: torch.Tensor,
) -> float:
    if not (0 <= skill_id < label_embs.shape[0]):
        raise UnknownSkillError(f"skill id {skill_id} outside label space")
    with torch.no_grad():
        p = detector(
            torch.as_tensor(s, dtype=torch.float32)[None],
            label_embs[skill_id][None],
            torch.as_tensor(s0, dtype=torch.float32)[None],
        )
    return float(p[0])


def boundary_positive_mask(length: int, transitions: list[int], dilation: int = BOUNDARY_DILATION) -> np.ndarray:
    """Positive timesteps: transition points dilated by +-dilation, clipped."""
    mask = np.zeros(length, dtype=bool)
    for t in transitions:
        mask[max(0, t - dilation) : min(length, t + dilation + 1)] = True
    return mask


def transition_timesteps(labels: np.ndarray) -> list[int]:
    return [t for t in range(len(labels) - 1) if labels[t] != labels[t + 1]]


def boundary_training_arrays(
    trajectories: list[Trajectory],
    label_embs: torch.Tensor,
    labels_override: list[np.ndarray] | None = None,
    dilation: int = BOUNDARY_DILATION,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(s_t, z-embedding, s_t0, target) rows for every timestep.

    ``labels_override`` substitutes pseudo-labels while targets still come
    from the label stream actually used (true or pseudo).
    """
    s_rows, z_rows, s0_rows, y_rows = [], [], [], []
    for ti, traj in enumerate(trajectories):
        labels = labels_override[ti] if labels_override is not None else traj.labels
        mask = boundary_positive_mask(len(traj), transition_timesteps(labels), dilation)
        seg_start = 0
        for t in range(len(traj)):
            if t > 0 and labels[t] != labels[t - 1]:
                seg_start = t
            s_rows.append(traj.states[t])
            z_rows.append(int(labels[t]))
            s0_rows.append(traj.states[seg_start])
            y_rows.append(float(mask[t]))
    return (
        torch.as_tensor(np.asarray(s_rows), dtype=torch.float32),
        label_embs[torch.tensor(z_rows, dtype=torch.long)],
        torch.as_tensor(np.asarray(s0_rows), dtype=torch.float32),
        torch.tensor(y_rows, dtype=torch.float32),
    )


def train_boundary(
    detector: BoundaryDetector,
    arrays: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
    steps: int = 800,
    batch_size: int = 256,
    lr: float = 1e-4,
    seed: int = 0,
) -> float:
    s, z, s0, y = arrays
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(detector.parameters(), lr=lr)
    detector.train()
    last = float("nan")
    for _ in range(steps):
        idx = torch.as_tensor(rng.integers(len(y), size=min(batch_size, len(y))))
        p = detector(s[idx], z[idx], s0[idx])
        loss = F.binary_cross_entropy(p, y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
    detector.eval()
    return last


def boundary_balanced_accuracy(
    detector: BoundaryDetector,
    arrays: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
    threshold: float = 0.5,
) -> float:
    s, z, s0, y = arrays
    with torch.no_grad():
        preds = []
        for i in range(0, len(y), 2048):
            preds.append(detector(s[i : i + 2048], z[i : i + 2048], s0[i : i + 2048]))
        p = torch.cat(preds) > threshold
    y = y.bool()
    tpr = float((p & y).sum()) / max(float(y.sum()), 1.0)
    tnr = float((~p & ~y).sum()) / max(float((~y).sum()), 1.0)
    return 0.5 * (tpr + tnr)
