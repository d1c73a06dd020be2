"""Relational reasoning: residual GCN over the semantic graph and an attention LSTM captioner."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class Vocabulary:
    def __init__(self, words):
        self.itos = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, captions, min_freq: int = 1):
        counts = Counter(w for c in captions for w in c)
        return cls(sorted(w for w, n in counts.items() if n >= min_freq))

    def __len__(self):
        return len(self.itos)

    @property
    def pad(self):
        return 0

    @property
    def bos(self):
        return 1

    @property
    def eos(self):
        return 2

    @property
    def unk(self):
        return 3

    def encode(self, tokens, warn=False):
        ids = [self.stoi.get(w, self.unk) for w in tokens]
        if warn and self.unk in ids:
            log.warning("caption has out-of-vocabulary tokens: %s", [w for w in tokens if w not in self.stoi])
        return ids

    def decode(self, ids):
        """Words up to the first end sentinel; padding and begin sentinels are dropped."""
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i not in (PAD_ID, BOS_ID):
                out.append(self.itos[i])
        return out


# ---------------------------------------------------------------------------
# graph encoder
# ---------------------------------------------------------------------------


class GraphEncoder(nn.Module):
    """Residual graph convolution over (head, relation, tail) triplets."""

    def __init__(self, dim: int, layers: int = 2):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(
            nn.ModuleDict({role: nn.Linear(3 * dim, dim) for role in ("head", "relation", "tail")})
            for _ in range(layers)
        )

    def forward(self, X, heads, relations, tails):
        """``X``: (V, dim) vertex features; index tensors pick triplet rows."""
        if len(heads) == 0:
            return X
        n = X.shape[0]
        count = torch.zeros(n, dtype=X.dtype)
        for idx in (heads, relations, tails):
            count = count.index_add(0, idx, torch.ones(len(idx), dtype=X.dtype))
        touched = (count > 0).unsqueeze(1)
        denom = count.clamp(min=1).unsqueeze(1)
        for layer in self.layers:
            cat = torch.cat([X[heads], X[relations], X[tails]], dim=1)
            agg = torch.zeros_like(X)
            agg = agg.index_add(0, heads, layer["head"](cat))
            agg = agg.index_add(0, relations, layer["relation"](cat))
            agg = agg.index_add(0, tails, layer["tail"](cat))
            X = torch.where(touched, torch.relu(agg / denom) + X, X)
        return X


def gcn_encode(features, triplet_rows, encoder: GraphEncoder):
    """Encode one scene's stacked vertex features; returns relation-aware features."""
    h, r, t = (torch.as_tensor(np.array(x, dtype=np.int64)) for x in triplet_rows)
    return encoder(torch.as_tensor(features), h, r, t)


def triplet_features(X, triplet_rows):
    """Row g is [x_head; x_relation; x_tail]."""
    h, r, t = (torch.as_tensor(np.array(x, dtype=np.int64)) for x in triplet_rows)
    if len(h) == 0:
        return X.new_zeros((0, 3 * X.shape[1]))
    return torch.cat([X[h], X[r], X[t]], dim=1)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


@dataclass
class DecoderState:
    h_att: torch.Tensor
    c_att: torch.Tensor
    h_lang: torch.Tensor
    c_lang: torch.Tensor
    t: int = 0

    def select(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return DecoderState(self.h_att[idx], self.c_att[idx], self.h_lang[idx], self.c_lang[idx], self.t)


class CaptionDecoder(nn.Module):
    """Top-down attention LSTM feeding a language LSTM."""

    def __init__(self, vocab_size, feat_dim, global_dim, embed_dim=512, hidden=512, att_hidden=512):
        super().__init__()
        self.hidden = hidden
        self.feat_dim = feat_dim
        self.embed = nn.Embedding(vocab_size, embed_dim)
        self.att_lstm = nn.LSTMCell(hidden + global_dim + embed_dim, hidden)
        self.feat_proj = nn.Linear(feat_dim, att_hidden)
        self.hid_proj = nn.Linear(hidden, att_hidden)
        self.att_score = nn.Linear(att_hidden, 1)
        self.lang_lstm = nn.LSTMCell(feat_dim + hidden, hidden)
        self.out = nn.Linear(hidden, vocab_size)
        self.null_context = nn.Parameter(torch.zeros(feat_dim))

    @property
    def vocab_size(self):
        return self.out.out_features

    def initial_state(self, batch: int) -> DecoderState:
        z = torch.zeros(batch, self.hidden)
        return DecoderState(z, z, z, z, 0)

    def pad_features(self, feats_list):
        """Pad per-scene (G_i, feat_dim) arrays to (B, G_max, feat_dim) plus mask.

        Scenes without triplets get the learned null context as their only entry.
        """
        B = len(feats_list)
        G = max(1, max(len(f) for f in feats_list))
        rows, masks = [], []
        for f in feats_list:
            if len(f) == 0:
                f = self.null_context.unsqueeze(0)
            pad = G - len(f)
            rows.append(torch.cat([f, f.new_zeros((pad, self.feat_dim))]) if pad else f)
            m = torch.zeros(G, dtype=torch.bool)
            m[: len(f)] = True
            masks.append(m)
        return torch.stack(rows) if B else torch.zeros(0, G, self.feat_dim), torch.stack(masks)

    def step(self, state: DecoderState, feats, mask, global_feat, prev_words, proj_feats=None):
        """One decoding step for a batch; returns (state, alpha, log word distribution)."""
        x = torch.cat([state.h_lang, global_feat, self.embed(prev_words)], dim=1)
        h_att, c_att = self.att_lstm(x, (state.h_att, state.c_att))
        if proj_feats is None:
            proj_feats = self.feat_proj(feats)
        e = self.att_score(torch.tanh(proj_feats + self.hid_proj(h_att).unsqueeze(1))).squeeze(-1)
        alpha = torch.softmax(e.masked_fill(~mask, float("-inf")), dim=1)
        context = (alpha.unsqueeze(-1) * feats).sum(1)
        h_lang, c_lang = self.lang_lstm(torch.cat([context, h_att], dim=1), (state.h_lang, state.c_lang))
        logp = torch.log_softmax(self.out(h_lang), dim=1)
        return DecoderState(h_att, c_att, h_lang, c_lang, state.t + 1), alpha, logp

    def teacher_forced(self, feats, mask, global_feat, targets, lengths):
        """Per-scene summed NLL of ``targets`` (B, T) and attention weights (B, T, G).

        Steps beyond each scene's length are masked out of the loss.
        """
        B, T = targets.shape
        state = self.initial_state(B)
        proj = self.feat_proj(feats)
        prev = torch.full((B,), BOS_ID, dtype=torch.long)
        nll = feats.new_zeros(B)
        alphas, correct = [], feats.new_zeros(B)
        for t in range(T):
            state, alpha, logp = self.step(state, feats, mask, global_feat, prev, proj)
            valid = (t < lengths).to(feats.dtype)
            y = targets[:, t]
            nll = nll - valid * logp.gather(1, y.unsqueeze(1)).squeeze(1)
            correct = correct + valid * (logp.argmax(1) == y).to(feats.dtype)
            alphas.append(alpha)
            prev = y
        return nll, torch.stack(alphas, dim=1), correct



def decode_step(state, triplet_feats, global_feat, prev_word: int, decoder: CaptionDecoder):
    """Single-scene step; returns (state, alpha over G triplets, word distribution)."""
    feats, mask = decoder.pad_features([torch.as_tensor(triplet_feats)])
    g = torch.as_tensor(global_feat).reshape(1, -1)
    if not 0 <= prev_word < decoder.vocab_size:
        prev_word = UNK_ID
    state, alpha, logp = decoder.step(state, feats, mask, g, torch.tensor([prev_word]))
    G = len(triplet_feats)
    return state, alpha[0, :G], logp[0].exp()


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


@dataclass
class Caption:
    tokens: list[int]
    logprob: float
    finished: bool = True

    def with_sentinels(self):
        return [BOS_ID] + self.tokens + ([EOS_ID] if self.finished else [])


class SceneStepper:
    """Adapts a decoder plus one scene's inputs to the search interface."""

    def __init__(self, decoder: CaptionDecoder, triplet_feats, global_feat):
        self.decoder = decoder
        feats, mask = decoder.pad_features([torch.as_tensor(triplet_feats)])
        self.feats, self.mask = feats, mask
        self.proj = decoder.feat_proj(feats)
        self.global_feat = torch.as_tensor(global_feat).reshape(1, -1)

    def initial_state(self):
        return self.decoder.initial_state(1)

    def step(self, state, prev_tokens):
        n = len(prev_tokens)
        with torch.no_grad():
            state, _, logp = self.decoder.step(
                state,
                self.feats.expand(n, -1, -1),
                self.mask.expand(n, -1),
                self.global_feat.expand(n, -1),
                torch.as_tensor(prev_tokens, dtype=torch.long),
                self.proj.expand(n, -1, -1),
            )
        return state, logp.numpy()

    def select(self, state, idx):
        return state.select(idx)


def greedy_decode(stepper, max_len: int, bos=BOS_ID, eos=EOS_ID) -> Caption:
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    state = stepper.initial_state()
    prev, tokens, score = bos, [], 0.0
    for _ in range(max_len):
        state, logp = stepper.step(state, [prev])
        w = int(np.argmax(logp[0]))
        score += float(logp[0, w])
        if w == eos:
            return Caption(tokens, score, True)
        tokens.append(w)
        prev = w
    return Caption(tokens, score, False)


def beam_search(stepper, beam: int, max_len: int, bos=BOS_ID, eos=EOS_ID) -> Caption:
    """Length-synchronous beam search over summed log-probabilities.

    Each step keeps the ``beam`` best expansions of the live hypotheses;
    expansions ending in ``eos`` retire to the finished pool. Hypotheses still
    live at ``max_len`` count as finished. Ties prefer the lexicographically
    smaller token sequence.

    Pruning can discard the greedy path before it overtakes the survivors,
    so the greedy hypothesis also enters the finished pool; the result never
    scores below greedy decoding.
    """
    if beam < 1:
        raise ConfigError("beam width must be at least 1")
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    g = greedy_decode(stepper, max_len, bos, eos)
    finished: list[tuple[tuple, float, bool]] = [(tuple(g.tokens), g.logprob, g.finished)]
    state = stepper.initial_state()
    live = [((), 0.0)]
    for _ in range(max_len):
        if not live:
            break
        state, logp = stepper.step(state, [toks[-1] if toks else bos for toks, _ in live])
        expansions = []
        for i, (toks, score) in enumerate(live):
            for w in range(logp.shape[1]):
                expansions.append((score + float(logp[i, w]), toks + (w,), i))
        expansions.sort(key=lambda e: (-e[0], e[1]))
        new_live, parents = [], []
        for score, toks, i in expansions[:beam]:
            if toks[-1] == eos:
                finished.append((toks[:-1], score, True))
            else:
                new_live.append((toks, score))
                parents.append(i)
        live = new_live
        if live:
            state = stepper.select(state, parents)
    finished.extend((toks, score, False) for toks, score in live)
    toks, score, done = min(finished, key=lambda f: (-f[1], f[0]))
    return Caption(list(toks), score, done)


def sequence_logprob(stepper, tokens, eos=EOS_ID, bos=BOS_ID, finished=True) -> float:
    """Summed log-probability of a token sequence (plus eos when finished)."""
    seq = list(tokens) + ([eos] if finished else [])
    state, prev, total = stepper.initial_state(), bos, 0.0
    for w in seq:
        state, logp = stepper.step(state, [prev])
        total += float(logp[0, w])
        prev = w
    return total


def caption_nll(decoder: CaptionDecoder, triplet_feats, global_feat, reference_ids):
    """Teacher-forced NLL of one reference (word ids, eos appended) and its alphas (T, G)."""
    if len(reference_ids) == 0:
        raise ContractError("reference caption is empty")
    target = torch.tensor([list(reference_ids) + [EOS_ID]], dtype=torch.long)
    feats, mask = decoder.pad_features([torch.as_tensor(triplet_feats)])
    g = torch.as_tensor(global_feat).reshape(1, -1)
    nll, alphas, _ = decoder.teacher_forced(feats, mask, g, target, torch.tensor([target.shape[1]]))
    return nll[0], alphas[0, :, : len(triplet_feats)]


def greedy_decode_batch(decoder: CaptionDecoder, feats, mask, global_feat, max_len: int):
    """Greedy decoding of a padded batch; token lists exclude sentinels."""
    B = feats.shape[0]
    state = decoder.initial_state(B)
    proj = decoder.feat_proj(feats)
    prev = torch.full((B,), BOS_ID, dtype=torch.long)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with torch.no_grad():
        for _ in range(max_len):
            state, _, logp = decoder.step(state, feats, mask, global_feat, prev, proj)
            words = np.argmax(logp.numpy(), axis=1)
            for b in range(B):
                if not done[b]:
                    if words[b] == EOS_ID:
                        done[b] = True
                    else:
                        out[b].append(int(words[b]))
            if done.all():
                break
            prev = torch.as_tensor(words, dtype=torch.long)
    return out
