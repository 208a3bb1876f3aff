"""Multi-modal skill encoders.

Video windows are matched to skill labels by a contrastively trained
retriever: a small temporal encoder on the video side, and on the language
side a token-embedding pooler with an explicit block of learnable prompt
vectors. Sensor windows go through a supervised attention classifier, text
passes through unchanged. Together they turn a task prompt into a
skill-level token instruction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .prompts import TaskPrompt, harvest_vocab_tokens
from .vocab import SEP, Vocab, tokenize
from .world import SKILL_NAMES, Trajectory

VIDEO_WINDOW = 8
VIDEO_STRIDE = VIDEO_WINDOW // 2
SENSOR_WINDOW = 3


def build_shared_vocab() -> Vocab:
    return Vocab(harvest_vocab_tokens())


@dataclass
class LabelSpace:
    """Bijective id <-> label-string map plus the clause strings the grammar
    can emit (retrieval only scores the skill entries)."""

    skill_labels: list[str] = field(default_factory=lambda: list(SKILL_NAMES))
    clause_labels: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.skill_labels)

    def label_of(self, idx: int) -> str:
        return self.skill_labels[idx]

    def id_of(self, label: str) -> int:
        return self.skill_labels.index(label)


@dataclass
class SkillInstruction:
    tokens: list[str]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


class LabelEmbedder(nn.Module):
    """Token table plus a learnable prompt-vector block.

    The pooled prompt block and the pooled token embedding are concatenated
    before projection so the prompt context cannot drown the label identity.
    """

    def __init__(self, vocab_size: int, emb_dim: int = 64, n_prompt: int = 16):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, emb_dim, padding_idx=0)
        self.theta_p = nn.Parameter(torch.randn(n_prompt, emb_dim) * 0.02)
        self.proj = nn.Linear(2 * emb_dim, emb_dim)

    def embed_token_batch(self, token_ids: list[list[int]]) -> torch.Tensor:
        pooled = []
        prompt = self.theta_p.mean(dim=0)
        for ids in token_ids:
            toks = self.tok(torch.tensor(ids, dtype=torch.long)).mean(dim=0)
            pooled.append(torch.cat([prompt, toks]))
        out = self.proj(torch.stack(pooled))
        return F.normalize(out, dim=-1)


class VideoSkillEncoder(nn.Module):
    """Contrastive video-to-label retriever over observation windows."""

    def __init__(
        self,
        obs_dim: int,
        vocab: Vocab,
        label_space: LabelSpace | None = None,
        window: int = VIDEO_WINDOW,
        emb_dim: int = 64,
        n_prompt: int = 16,
        temperature: float = 0.07,
    ):
        super().__init__()
        self.obs_dim = obs_dim
        self.window = window
        self.emb_dim = emb_dim
        self.temperature = temperature
        self.vocab = vocab
        self.label_space = label_space or LabelSpace()
        self.gru = nn.GRU(obs_dim, emb_dim, batch_first=True)
        self.video_proj = nn.Linear(emb_dim, emb_dim)
        self.label_embedder = LabelEmbedder(len(vocab), emb_dim, n_prompt)
        self._label_tokens = [
            vocab.encode(tokenize(lbl)) for lbl in self.label_space.skill_labels
        ]

    def embed_videos(self, windows: torch.Tensor) -> torch.Tensor:
        _, h = self.gru(windows)
        return F.normalize(self.video_proj(h[-1]), dim=-1)

    def embed_labels(self, label_ids: list[int] | None = None) -> torch.Tensor:
        ids = label_ids if label_ids is not None else range(len(self.label_space))
        return self.label_embedder.embed_token_batch([self._label_tokens[i] for i in ids])

    def embed_tokens(self, tokens: list[str]) -> torch.Tensor:
        """Language-space embedding of an arbitrary token sequence."""
        return self.label_embedder.embed_token_batch([self.vocab.encode(tokens)])[0]

    @torch.no_grad()
    def retrieve_batch(self, windows: np.ndarray) -> np.ndarray:
        self.eval()
        v = self.embed_videos(torch.as_tensor(windows, dtype=torch.float32))
        l = self.embed_labels()
        sims = v @ l.T
        # argmax returns the first maximum, so ties break toward the lowest id
        return sims.argmax(dim=1).numpy()

    def retrieve_skill(self, window: np.ndarray) -> int:
        if window.shape != (self.window, self.obs_dim):
            window = pad_window(window, self.window)
        return int(self.retrieve_batch(window[None])[0])


def pad_window(frames: np.ndarray, window: int) -> np.ndarray:
    """Left-pad by repeating the first frame."""
    if len(frames) >= window:
        return frames[-window:]
    pad = np.repeat(frames[:1], window - len(frames), axis=0)
    return np.concatenate([pad, frames], axis=0)


def video_windows(observations: np.ndarray, window: int = VIDEO_WINDOW) -> np.ndarray:
    """Window ending at every timestep, first frames repeated on the left."""
    padded = np.concatenate([np.repeat(observations[:1], window - 1, axis=0), observations])
    view = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)
    return np.ascontiguousarray(np.moveaxis(view, -1, 1), dtype=np.float32)


LABEL_LAG = 3  # frames of a new skill a window needs before it shows it


def collect_training_windows(
    trajectories: list[Trajectory],
    window: int = VIDEO_WINDOW,
    stride: int = 1,
    lag: int = LABEL_LAG,
) -> tuple[np.ndarray, np.ndarray]:
    """Window/label pairs for contrastive training.

    A window is labeled with the skill it shows: the annotation ``lag``
    frames before its end. Right after a transition a window still mostly
    displays the previous skill, so it keeps the previous label until the
    new skill has a few frames of evidence. This keeps every training target
    inferable from the frames and makes boundary windows flip prev->next
    rather than to an arbitrary third skill.
    """
    wins, labels = [], []
    for traj in trajectories:
        w = video_windows(traj.observations, window)
        keep = np.arange(lag, len(traj), stride)
        wins.append(w[keep])
        labels.append(traj.labels[np.maximum(keep - lag, 0)])
    return np.concatenate(wins), np.concatenate(labels)


def collect_settled_windows(
    trajectories: list[Trajectory],
    window: int = VIDEO_WINDOW,
    stride: int = 1,
    min_real_frames: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Window/label pairs for retrieval scoring: only windows whose frames
    all carry the end label, with enough real (non-padded) frames for motion
    to be visible. Boundary-straddling windows show two skills at once and
    motionless padded starts show none, so neither is a fair retrieval
    query."""
    wins, labels = [], []
    for traj in trajectories:
        w = video_windows(traj.observations, window)
        keep = np.arange(0, len(traj), stride)
        pure = np.array(
            [
                t + 1 >= min_real_frames
                and np.all(traj.labels[max(0, t - window + 1) : t + 1] == traj.labels[t])
                for t in keep
            ]
        )
        keep = keep[pure]
        wins.append(w[keep])
        labels.append(traj.labels[keep])
    return np.concatenate(wins), np.concatenate(labels)


def train_video_encoder(
    model: VideoSkillEncoder,
    windows: np.ndarray,
    labels: np.ndarray,
    steps: int = 1500,
    lr: float = 1e-4,
    seed: int = 0,
) -> float:
    """Symmetric InfoNCE over per-step batches holding one window per
    distinct label. Batches with fewer than two distinct labels are skipped."""
    rng = np.random.default_rng(seed)
    by_label = {int(l): np.flatnonzero(labels == l) for l in np.unique(labels)}
    if len(by_label) < 2:
        warnings.warn("fewer than two distinct labels; contrastive training skipped")
        return float("nan")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    last = float("nan")
    label_ids = sorted(by_label)
    for _ in range(steps):
        batch_ids = label_ids
        idx = [by_label[l][rng.integers(len(by_label[l]))] for l in batch_ids]
        v = torch.as_tensor(windows[idx], dtype=torch.float32)
        v_emb = model.embed_videos(v)
        l_emb = model.embed_labels(batch_ids)
        logits = v_emb @ l_emb.T / model.temperature
        target = torch.arange(len(batch_ids))
        loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
    model.eval()
    return last


def infonce_loss(v_emb: torch.Tensor, l_emb: torch.Tensor, temperature: float) -> torch.Tensor:
    logits = v_emb @ l_emb.T / temperature
    target = torch.arange(v_emb.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def retrieval_accuracy(model: VideoSkillEncoder, windows: np.ndarray, labels: np.ndarray) -> float:
    preds = []
    for i in range(0, len(windows), 1024):
        preds.append(model.retrieve_batch(windows[i : i + 1024]))
    return float(np.mean(np.concatenate(preds) == labels))


class SensorClassifier(nn.Module):
    """Attention classifier over short (state, action) windows."""

    def __init__(
        self,
        state_dim: int,
        n_skills: int,
        window: int = SENSOR_WINDOW,
        d_model: int = 256,
        n_layers: int = 4,
        n_heads: int = 4,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.window = window
        self.state_dim = state_dim
        self.inp = nn.Linear(state_dim + 4, d_model)
        self.pos = nn.Embedding(window, d_model)
        layer = nn.TransformerEncoderLayer(
            d_model, n_heads, d_model, dropout, activation="relu", batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers)
        self.head = nn.Linear(d_model, n_skills)

    def forward(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        x = torch.cat([states, actions], dim=-1)
        h = self.inp(x) + self.pos(torch.arange(self.window))
        return self.head(self.encoder(h).mean(dim=1))

    @torch.no_grad()
    def classify(self, states: np.ndarray, actions: np.ndarray) -> int:
        if len(states) < self.window or len(actions) < self.window:
            raise ValidationError(f"sensor window shorter than {self.window}")
        self.eval()
        s = torch.as_tensor(states[-self.window :], dtype=torch.float32)[None]
        a = torch.as_tensor(actions[-self.window :], dtype=torch.float32)[None]
        return int(self(s, a).argmax(dim=-1))


def collect_sensor_windows(
    trajectories: list[Trajectory], window: int = SENSOR_WINDOW
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    st, ac, labels = [], [], []
    for traj in trajectories:
        for t in range(window - 1, len(traj)):
            st.append(traj.states[t - window + 1 : t + 1])
            ac.append(traj.actions[t - window + 1 : t + 1])
            labels.append(traj.labels[t])
    return (
        np.asarray(st, dtype=np.float32),
        np.asarray(ac, dtype=np.float32),
        np.asarray(labels, dtype=np.int64),
    )


def train_sensor_classifier(
    model: SensorClassifier,
    states: np.ndarray,
    actions: np.ndarray,
    labels: np.ndarray,
    steps: int = 600,
    batch_size: int = 256,
    lr: float = 5e-4,
    seed: int = 0,
) -> float:
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    last = float("nan")
    for _ in range(steps):
        idx = rng.integers(len(labels), size=min(batch_size, len(labels)))
        logits = model(
            torch.as_tensor(states[idx]), torch.as_tensor(actions[idx])
        )
        loss = F.cross_entropy(logits, torch.as_tensor(labels[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
    model.eval()
    return last


def sensor_accuracy(model, states, actions, labels) -> float:
    hits = 0
    with torch.no_grad():
        for i in range(0, len(labels), 1024):
            logits = model(torch.as_tensor(states[i : i + 1024]), torch.as_tensor(actions[i : i + 1024]))
            hits += int((logits.argmax(dim=-1).numpy() == labels[i : i + 1024]).sum())
    return hits / len(labels)


def dedup_consecutive(seq: list[int]) -> list[int]:
    out: list[int] = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(s)
    return out


def encode_prompt(
    prompt: TaskPrompt,
    video_model: VideoSkillEncoder,
    sensor_model: SensorClassifier,
    stride: int = VIDEO_STRIDE,
    max_len: int = 96,
) -> SkillInstruction:
    """Per-snippet encoding concatenated in prompt order with a separator.

    Video snippets are retrieved per window over a stride with consecutive
    duplicates collapsed; sensor snippets are classified; text is identity.
    """
    parts: list[list[str]] = []
    for snippet in prompt.snippets:
        if snippet.modality == "video":
            obs = snippet.payload
            wins = video_windows(obs, video_model.window)
            ends = list(range(min(video_model.window, len(obs)) - 1, len(obs), stride))
            if ends[-1] != len(obs) - 1:
                ends.append(len(obs) - 1)
            ids = dedup_consecutive([int(i) for i in video_model.retrieve_batch(wins[ends])])
            toks: list[str] = []
            for sid in ids:
                toks.extend(tokenize(video_model.label_space.label_of(sid)))
            parts.append(toks)
        elif snippet.modality == "sensor":
            states, actions = snippet.payload
            sid = sensor_model.classify(states, actions)
            parts.append(tokenize(video_model.label_space.label_of(sid)))
        else:
            parts.append(tokenize(snippet.payload))
    tokens: list[str] = []
    for i, part in enumerate(parts):
        if i > 0:
            tokens.append(SEP)
        tokens.extend(part)
    if len(tokens) > max_len:
        raise ValidationError(f"instruction length {len(tokens)} exceeds {max_len}")
    return SkillInstruction(tokens)


def subset_annotation_windows(
    windows: np.ndarray, labels: np.ndarray, n_per_skill: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """First-n sample per skill from a seed-fixed shuffle, so growing n gives
    nested subsets."""
    rng = np.random.default_rng(seed)
    keep = []
    for lbl in np.unique(labels):
        pool = np.flatnonzero(labels == lbl)
        order = rng.permutation(len(pool))
        keep.extend(pool[order[:n_per_skill]])
    keep = np.sort(np.asarray(keep))
    return windows[keep], labels[keep]


def pseudo_label(
    trajectories: list[Trajectory], model: VideoSkillEncoder
) -> list[np.ndarray]:
    """Per-timestep retrieved labels for every trajectory; originals stay on
    the trajectory for scoring."""
    out = []
    for traj in trajectories:
        wins = video_windows(traj.observations, model.window)
        out.append(model.retrieve_batch(wins))
    return out


def pseudo_label_accuracy(trajectories: list[Trajectory], pseudo: list[np.ndarray]) -> float:
    hits = sum(int((p == t.labels).sum()) for p, t in zip(pseudo, trajectories))
    total = sum(len(t) for t in trajectories)
    return hits / total
