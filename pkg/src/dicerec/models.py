"""Item embeddings, state encoders, the Gumbel-Softmax actor and the state-action critic."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from dicerec import diffcore as dc
from dicerec.datasets import PAD
from dicerec.diffcore import Node, ParamStore

BACKBONES = ("gru", "cnn")


@dataclass
class ModelConfig:
    window: int = 10
    embed_dim: int = 50
    state_dim: int = 64
    actor_hidden: int = 512
    critic_hidden: int = 512
    critic_features: int = 3
    gumbel_temperature: float = 0.2
    delta: float = 1e-2
    gamma: float = 0.9
    lr_critic: float = 5e-3
    lr_actor: float = 5e-3
    epochs: int = 50
    batch_size: int = 256
    backbone: str = "gru"
    gru_layers: int = 2
    cnn_heights: tuple[int, ...] = (1, 2, 3)
    cnn_filters: int = 16
    cnn_vertical: int = 4
    embed_std: float = 0.1
    fisher_samples: int = 32
    fisher_damping: float = 1e-8
    optimizer: str = "adam"

    def __post_init__(self):
        self.cnn_heights = tuple(int(h) for h in self.cnn_heights)
        self.validate()

    def validate(self) -> None:
        positive = ("window", "embed_dim", "state_dim", "actor_hidden", "critic_hidden", "critic_features",
                    "gumbel_temperature", "batch_size", "gru_layers", "cnn_filters", "cnn_vertical",
                    "embed_std", "fisher_samples")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        for name in ("delta", "lr_critic", "lr_actor", "epochs", "fisher_damping"):
            if getattr(self, name) < 0:
                raise ValueError(f"ModelConfig.{name} must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount gamma must lie in [0, 1), got {self.gamma}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if any(h < 1 or h > self.window for h in self.cnn_heights):
            raise ValueError("cnn_heights must lie in [1, window]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_heights"] = list(self.cnn_heights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class PolicyModel:
    """Shared-encoder actor-critic over an item catalogue of size ``num_items``.

    Parameter groups: ``embedding`` and ``enc.*`` and ``actor.*`` form the
    recommender parameters (``theta``); ``critic.*`` forms the critic head
    (``phi``). Row 0 of the embedding table is the padding item and never
    receives gradient.
    """

    def __init__(self, config: ModelConfig, num_items: int, rng: np.random.Generator | None = None):
        if num_items < 1:
            raise ValueError("num_items must be positive")
        self.config = config
        self.num_items = num_items
        self.params = ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        self._init_params(rng)
        self.actor_params = self.params.subset(("embedding", "enc.", "actor."))
        self.critic_params = self.params.subset(("critic.",))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        c, p = self.config, self.params
        emb = rng.normal(0.0, c.embed_std, size=(self.num_items + 1, c.embed_dim))
        emb[PAD] = 0.0
        p.add("embedding", emb)
        if c.backbone == "gru":
            H = c.state_dim
            for layer in range(c.gru_layers):
                fan = c.embed_dim if layer == 0 else H
                p.add(f"enc.gru{layer}.w_in", glorot(rng, fan, 3 * H))
                p.add(f"enc.gru{layer}.w_hid", glorot(rng, H, 3 * H))
                p.add(f"enc.gru{layer}.b_in", np.zeros(3 * H))
                p.add(f"enc.gru{layer}.b_hid", np.zeros(3 * H))
        else:
            for h in c.cnn_heights:
                p.add(f"enc.conv_h{h}.w", glorot(rng, h * c.embed_dim, c.cnn_filters))
                p.add(f"enc.conv_h{h}.b", np.zeros(c.cnn_filters))
            p.add("enc.conv_v.w", glorot(rng, c.window, c.cnn_vertical))
            feat = len(c.cnn_heights) * c.cnn_filters + c.embed_dim * c.cnn_vertical
            p.add("enc.proj.w", glorot(rng, feat, c.state_dim))
            p.add("enc.proj.b", np.zeros(c.state_dim))
        p.add("actor.w1", glorot(rng, c.state_dim, c.actor_hidden))
        p.add("actor.b1", np.zeros(c.actor_hidden))
        p.add("actor.w2", glorot(rng, c.actor_hidden, c.embed_dim))
        p.add("actor.b2", np.zeros(c.embed_dim))
        p.add("critic.w", glorot(rng, c.state_dim + c.embed_dim, c.critic_hidden))
        p.add("critic.b", np.zeros(c.critic_hidden))
        p.add("critic.proj", glorot(rng, c.critic_hidden, c.critic_features))
        p.add("critic.out", glorot(rng, c.critic_features, 1)[:, 0])

    def item_table(self) -> Node:
        """Embedding rows of the real items (padding row excluded), shape (N, d_e)."""
        return dc.slice_axis(self.params["embedding"], 0, 1, self.num_items + 1)

    # -- forward pieces -----------------------------------------------------

    def embed(self, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() > self.num_items):
            raise IndexError(f"item ids must lie in [0, {self.num_items}]")
        return dc.row_select(self.params["embedding"], ids, padding_idx=PAD)

    def encode(self, windows) -> Node:
        windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
        if windows.shape[1] != self.config.window:
            raise ValueError(f"window length {windows.shape[1]} != configured {self.config.window}")
        if self.config.backbone == "gru":
            return self._encode_gru(windows)
        return self._encode_cnn(windows)

    def _encode_gru(self, windows: np.ndarray) -> Node:
        c, p = self.config, self.params
        B = windows.shape[0]
        hidden = [dc.constant(np.zeros((B, c.state_dim))) for _ in range(c.gru_layers)]
        for t in range(c.window):
            mask = windows[:, t] != PAD
            if not mask.any():
                continue  # an all-padding step leaves every hidden state unchanged
            x = self.embed(windows[:, t])
            for layer in range(c.gru_layers):
                pre = f"enc.gru{layer}."
                hidden[layer] = dc.gru_cell(x, hidden[layer], p[pre + "w_in"], p[pre + "w_hid"],
                                            p[pre + "b_in"], p[pre + "b_hid"], mask)
                x = hidden[layer]
        return hidden[-1]

    def _encode_cnn(self, windows: np.ndarray) -> Node:
        c, p = self.config, self.params
        B, w = windows.shape
        emb = self.embed(windows)  # (B, w, d_e)
        feats = []
        for h in c.cnn_heights:
            n_pos = w - h + 1
            unfolded = dc.concat([dc.slice_axis(emb, 1, j, j + n_pos) for j in range(h)], axis=-1)
            conv = dc.relu(dc.matmul(unfolded, p[f"enc.conv_h{h}.w"]) + p[f"enc.conv_h{h}.b"])
            feats.append(dc.max_axis(conv, axis=1))
        vertical = dc.matmul(dc.transpose(emb), p["enc.conv_v.w"])  # (B, d_e, n_v)
        feats.append(dc.reshape(vertical, (B, c.embed_dim * c.cnn_vertical)))
        return dc.matmul(dc.concat(feats, axis=-1), p["enc.proj.w"]) + p["enc.proj.b"]

    def actor_features(self, states: Node) -> Node:
        p = self.params
        hidden = dc.relu(dc.matmul(states, p["actor.w1"]) + p["actor.b1"])
        return dc.matmul(hidden, p["actor.w2"]) + p["actor.b2"]

    def policy_logits(self, states: Node) -> Node:
        """Scores over items ``1..N``: inner products of actor features with item embeddings."""
        return dc.matmul(self.actor_features(states), dc.transpose(self.item_table()))

    def action_embedding(self, actions) -> Node:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.size and (actions.min() < 1 or actions.max() > self.num_items):
            raise IndexError(f"actions must lie in [1, {self.num_items}]")
        return dc.row_select(self.params["embedding"], actions)

    def soft_action_embedding(self, y: Node) -> Node:
        """Convex combination of item embeddings weighted by a relaxed one-hot ``y``."""
        return dc.matmul(y, self.item_table())

    def critic_value(self, states: Node, action_emb: Node) -> Node:
        """``v(s, a) = w . P relu(W [s; e_a] + b)`` per row; returns shape (B,)."""
        c, p = self.config, self.params
        if states.shape[-1] != c.state_dim or action_emb.shape[-1] != c.embed_dim:
            raise dc.ShapeError("critic_value", states.shape, action_emb.shape)
        x = dc.concat([states, action_emb], axis=-1)
        hidden = dc.relu(dc.matmul(x, p["critic.w"]) + p["critic.b"])
        features = dc.matmul(hidden, p["critic.proj"])
        return dc.matmul(features, p["critic.out"])

    # -- inference helpers --------------------------------------------------

    def scores(self, windows, chunk: int = 2048) -> np.ndarray:
        """Plain logits for a batch of windows, no noise or temperature."""
        windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
        out = [self.policy_logits(self.encode(windows[i:i + chunk])).value
               for i in range(0, windows.shape[0], chunk)]
        return np.concatenate(out, axis=0)

    def probabilities(self, windows) -> np.ndarray:
        return dc._softmax(self.scores(windows))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits: Node, temperature: float, rng: np.random.Generator | None = None,
                          noise: np.ndarray | None = None) -> tuple[Node, np.ndarray]:
    """Relaxed one-hot sample ``softmax((log pi + g) / temperature)`` and its hard index.

    ``log pi`` differs from the logits by a per-row constant, which softmax
    ignores, so the logits are used directly. The returned hard index is
    0-based over the score columns.
    """
    if temperature <= 0:
        raise ValueError("Gumbel temperature must be positive")
    if noise is None:
        if rng is None:
            raise ValueError("pass either rng or noise")
        noise = gumbel_noise(rng, logits.shape)
    perturbed = dc.scale(logits + dc.constant(noise), 1.0 / temperature)
    return dc.softmax(perturbed), np.argmax(logits.value + noise, axis=-1)
