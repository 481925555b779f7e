"""Patch matching: ensemble embeddings, bilinear scoring, training, eval.

A patch x inside a frame yields three vectors of shared width n:

  f(x)    raw descriptor of the patch itself,
  rho(x)  its vertex embedding from the neighborhood graph network,
  g(G^x)  the pooled embedding of its whole neighborhood graph,

combined into the ensemble embeddings

  phi(x)   = rho(x) | f(x)            (length 2n)
  psi(G^x) = g(G^x) | rho(x) | f(x)   (length 3n)

A learnable block bilinear form scores directed pairs,
d(phi, psi) = sigmoid(phi^T M psi), with M the 2n x 3n matrix

      [ 0    M12  0   ]
  M = [ M21  M22  M23 ]

whose zero blocks are structural (never trained, never stored).  The match
score averages both directions; training minimizes a binary-information
loss over labeled pairs.
"""

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import FeaturizerParams, featurize, init_featurizer
from .gnn import GnnParams, embed_graph, init_gnn
from .neighbors import DEFAULT_K, graph_for_patch
from .seeds import rng_for

SCORE_CLAMP = (1e-7, 1.0 - 1e-7)
PAIRINGS = ("f_f", "rho_rho", "phi_phi", "psi_psi", "phi_psi")
DISCRIMINATORS = ("bilinear", "cosine", "l2")


@dataclass
class ModelConfig:
    n: int = 32
    k: int = DEFAULT_K
    gamma: float = 0.5
    featurizer: str = "fixed_hist"
    architecture: str = "gat"
    heads: int = 4
    pool: str = "mean"
    channels: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("embedding dim must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("decision threshold must lie in [0, 1]")


@dataclass
class DiscriminatorParams:
    m12: object
    m21: object
    m22: object
    m23: object

    def __post_init__(self):
        shapes = {name: t.data.shape for name, t in self.blocks().items()}
        first = next(iter(shapes.values()))
        if any(s != first or s[0] != s[1] for s in shapes.values()):
            raise ValueError("discriminator blocks must share one square "
                             "shape, got %r" % shapes)

    def blocks(self):
        return {"m12": self.m12, "m21": self.m21,
                "m22": self.m22, "m23": self.m23}

    @property
    def n(self):
        return self.m12.data.shape[0]

    def trainable(self):
        return [t for t in self.blocks().values() if t.requires_grad]

    def named_tensors(self, prefix="disc."):
        return {prefix + k: v for k, v in self.blocks().items()}

    def full_matrix(self):
        """The assembled 2n x 3n matrix with structural zero blocks."""
        n = self.n
        full = np.zeros((2 * n, 3 * n))
        full[:n, n:2 * n] = self.m12.data
        full[n:, :n] = self.m21.data
        full[n:, n:2 * n] = self.m22.data
        full[n:, 2 * n:] = self.m23.data
        return full


def init_discriminator(n, seed):
    """Blocks uniform in +-1/n: initial logits are small, scores near 0.5."""
    rng = rng_for(seed, "discriminator")
    bound = 1.0 / n
    blocks = [ad.parameter(rng.uniform(-bound, bound, size=(n, n)))
              for _ in range(4)]
    return DiscriminatorParams(*blocks)


@dataclass
class MatchModel:
    featurizer: FeaturizerParams
    gnn: GnnParams
    disc: DiscriminatorParams
    config: ModelConfig

    def __post_init__(self):
        dims = (self.featurizer.n, self.gnn.n, self.disc.n, self.config.n)
        if len(set(dims)) != 1:
            raise ValueError("inconsistent embedding dims %r across "
                             "featurizer/gnn/discriminator/config" % (dims,))

    def trainable(self):
        return (self.featurizer.trainable() + self.gnn.trainable()
                + self.disc.trainable())

    def named_tensors(self):
        out = {}
        out.update(self.featurizer.named_tensors())
        out.update(self.gnn.named_tensors())
        out.update(self.disc.named_tensors())
        return out


def init_model(config, seed):
    return MatchModel(
        featurizer=init_featurizer(config.featurizer, config.n, seed,
                                   channels=config.channels),
        gnn=init_gnn(config.architecture, config.n, seed, heads=config.heads),
        disc=init_discriminator(config.n, seed),
        config=config,
    )


def save_model(path, model):
    """Tensor checkpoint plus a JSON config sidecar at <path>.config.json."""
    ad.save_named_tensors(path, {k: v.data for k, v in
                                 model.named_tensors().items()})
    with open(str(path) + ".config.json", "w") as fh:
        json.dump(vars(model.config), fh, indent=1, sort_keys=True)


def load_model(path):
    with open(str(path) + ".config.json") as fh:
        config = ModelConfig(**json.load(fh))
    model = init_model(config, seed=0)
    stored = ad.load_named_tensors(path)
    expected = model.named_tensors()
    if set(stored) != set(expected):
        raise ValueError("checkpoint tensors %r do not match model %r"
                         % (sorted(stored), sorted(expected)))
    for name, tensor in expected.items():
        if stored[name].shape != tensor.data.shape:
            raise ValueError("checkpoint tensor %s has shape %r, expected %r"
                             % (name, stored[name].shape, tensor.data.shape))
        tensor.data = stored[name]
    return model


# -- embeddings ---------------------------------------------------------------

@dataclass
class EnsembleEmbedding:
    f: object
    rho: object
    g: object
    phi: object   # rho | f, length 2n
    psi: object   # g | rho | f, length 3n

    def __post_init__(self):
        n = self.f.data.shape[0]
        if self.phi.data.shape != (2 * n,) or self.psi.data.shape != (3 * n,):
            raise ValueError("ensemble embedding lengths must be 2n and 3n")


def assemble_embeddings(patch, frame, model):
    """Featurize every vertex of the patch's neighborhood graph, embed the
    graph, and concatenate the ensemble vectors."""
    graph = graph_for_patch(patch, frame, k=model.config.k)
    feats = ad.stack_rows([featurize(v, model.featurizer)
                           for v in graph.vertices])
    emb = embed_graph(graph, feats, model.gnn, pool=model.config.pool)
    f = ad.row(feats, 0)
    rho = emb.center()
    g = emb.graph
    return EnsembleEmbedding(f=f, rho=rho, g=g,
                             phi=ad.concat([rho, f]),
                             psi=ad.concat([g, rho, f]))


def discriminate(phi, psi, disc):
    """Directed score sigmoid(phi^T M psi) via the four nonzero blocks."""
    n = disc.n
    if phi.data.shape != (2 * n,) or psi.data.shape != (3 * n,):
        raise ValueError("expected phi of length %d and psi of length %d, "
                         "got %r and %r" % (2 * n, 3 * n, phi.data.shape,
                                            psi.data.shape))
    rho_x, f_x = ad.slice1d(phi, 0, n), ad.slice1d(phi, n, 2 * n)
    g_y = ad.slice1d(psi, 0, n)
    rho_y = ad.slice1d(psi, n, 2 * n)
    f_y = ad.slice1d(psi, 2 * n, 3 * n)
    logit = (ad.dot(rho_x, disc.m12 @ rho_y)
             + ad.dot(f_x, disc.m21 @ g_y)
             + ad.dot(f_x, disc.m22 @ rho_y)
             + ad.dot(f_x, disc.m23 @ f_y))
    return ad.sigmoid(logit)


def full_bilinear_score(phi, psi, disc):
    """Reference route through the fully assembled matrix (zero blocks and
    all); must agree with ``discriminate`` to machine precision."""
    logit = float(phi.data @ disc.full_matrix() @ psi.data)
    return 1.0 / (1.0 + math.exp(-logit)) if logit >= 0 else \
        math.exp(logit) / (1.0 + math.exp(logit))


# -- scoring ------------------------------------------------------------------

@dataclass
class MatchResult:
    score: float
    decision: int
    score_xy: float   # d(phi_x, psi_{G_y})
    score_yx: float   # d(phi_y, psi_{G_x})


class FlagshipScorer:
    """Directed block-bilinear scores between phi and the partner's psi."""

    def __init__(self, model):
        self.model = model

    def embed(self, patch, frame, cache=None):
        key = (frame.frame_id, patch.patch_id)
        if cache is not None and key in cache:
            return cache[key]
        emb = assemble_embeddings(patch, frame, self.model)
        if cache is not None:
            cache[key] = emb
        return emb

    def score_pair(self, patch_x, frame_x, patch_y, frame_y, cache=None):
        ex = self.embed(patch_x, frame_x, cache)
        ey = self.embed(patch_y, frame_y, cache)
        return (discriminate(ex.phi, ey.psi, self.model.disc),
                discriminate(ey.phi, ex.psi, self.model.disc))

    def trainable(self):
        return self.model.trainable()


def match_score(patch_x, frame_x, patch_y, frame_y, model, gamma=None):
    """Symmetric score S = (d(phi_x,psi_y) + d(phi_y,psi_x)) / 2 and the
    strict-threshold decision."""
    gamma = model.config.gamma if gamma is None else gamma
    d_xy, d_yx = FlagshipScorer(model).score_pair(patch_x, frame_x,
                                                  patch_y, frame_y)
    s = 0.5 * (float(d_xy.data) + float(d_yx.data))
    return MatchResult(score=s, decision=int(s > gamma),
                       score_xy=float(d_xy.data), score_yx=float(d_yx.data))


# -- loss ---------------------------------------------------------------------

def loss_from_scores(score_pairs, labels):
    """-(1/N) sum of per-pair two-direction log terms; scores clamped to
    [1e-7, 1-1e-7] before the log."""
    if len(score_pairs) == 0:
        raise ValueError("empty batch")
    if len(score_pairs) != len(labels):
        raise ValueError("score/label count mismatch")
    lo, hi = SCORE_CLAMP
    terms = []
    for (d1, d2), label in zip(score_pairs, labels):
        d1 = ad.clamp(ad.reshape(d1, (1,)), lo, hi)
        d2 = ad.clamp(ad.reshape(d2, (1,)), lo, hi)
        if label == 1:
            term = (ad.log(d1) + ad.log(d2)) * 0.5
        elif label == 0:
            term = (ad.log(1.0 - d1) + ad.log(1.0 - d2)) * 0.5
        else:
            raise ValueError("labels must be 0 or 1, got %r" % (label,))
        terms.append(ad.reshape(term, ()))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return -(total * (1.0 / len(terms)))


def loss_emp_id(batch, model, scorer=None, cache=None):
    """Information-distance loss over labeled patch pairs.

    ``batch`` rows are (patch_x, frame_x, patch_y, frame_y, label).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    scorer = FlagshipScorer(model) if scorer is None else scorer
    cache = {} if cache is None else cache
    score_pairs = [scorer.score_pair(px, fx, py, fy, cache)
                   for (px, fx, py, fy, _) in batch]
    return loss_from_scores(score_pairs, [row[4] for row in batch])


# -- ablation variants --------------------------------------------------------

def _pairing_vectors(ex, ey, pairing):
    if pairing == "f_f":
        return ex.f, ey.f
    if pairing == "rho_rho":
        return ex.rho, ey.rho
    if pairing == "phi_phi":
        return ex.phi, ey.phi
    if pairing == "psi_psi":
        return ex.psi, ey.psi
    if pairing == "phi_psi":
        return ex.phi, ey.psi
    raise ValueError("unknown pairing %r" % pairing)


def _cosine_score(a, b):
    na = math.sqrt(float(a.data @ a.data))
    nb = math.sqrt(float(b.data @ b.data))
    if na == 0.0 or nb == 0.0:
        return ad.constant(0.5)
    return ad.dot(a, b) * (1.0 / (na * nb)) * 0.5 + 0.5


def _l2_score(a, b):
    # exp(-||a-b||); exact 1.0 for identical vectors.  Metric variants are
    # never trained, so the sqrt kink at 0 never sees a backward pass.
    diff = a - b
    return ad.exp(-ad.sqrt(ad.dot(diff, diff)))


class VariantScorer:
    """Ablation scorer: one embedding pairing x one discriminator family.

    The learnable-bilinear flagship (phi_psi) uses the model's block
    discriminator; other bilinear pairings use a plain square matrix.  The
    cosine and L2 discriminators need equal-length operands, so the
    phi_psi pairing falls back to comparing the two psi vectors.
    """

    def __init__(self, model, pairing, discriminator, seed=0):
        if pairing not in PAIRINGS:
            raise ValueError("unknown pairing %r" % pairing)
        if discriminator not in DISCRIMINATORS:
            raise ValueError("unknown discriminator %r" % discriminator)
        self.model = model
        self.pairing = pairing
        self.discriminator = discriminator
        self.matrix = None
        if discriminator == "bilinear" and pairing != "phi_psi":
            n = model.config.n
            width = {"f_f": n, "rho_rho": n,
                     "phi_phi": 2 * n, "psi_psi": 3 * n}[pairing]
            rng = rng_for(seed, "ablation/" + pairing)
            self.matrix = ad.parameter(
                rng.uniform(-1.0 / width, 1.0 / width, size=(width, width)))

    def embed(self, patch, frame, cache=None):
        return FlagshipScorer(self.model).embed(patch, frame, cache)

    def _directed(self, ex, ey):
        if self.discriminator == "bilinear":
            if self.pairing == "phi_psi":
                return discriminate(ex.phi, ey.psi, self.model.disc)
            a, b = _pairing_vectors(ex, ey, self.pairing)
            return ad.sigmoid(ad.dot(a, self.matrix @ b))
        if self.pairing == "phi_psi":
            a, b = ex.psi, ey.psi
        else:
            a, b = _pairing_vectors(ex, ey, self.pairing)
        if self.discriminator == "cosine":
            return _cosine_score(a, b)
        return _l2_score(a, b)

    def score_pair(self, patch_x, frame_x, patch_y, frame_y, cache=None):
        ex = self.embed(patch_x, frame_x, cache)
        ey = self.embed(patch_y, frame_y, cache)
        return self._directed(ex, ey), self._directed(ey, ex)

    def trainable(self):
        if self.discriminator != "bilinear":
            return []
        if self.pairing == "phi_psi":
            return self.model.trainable()
        return (self.model.featurizer.trainable()
                + self.model.gnn.trainable() + [self.matrix])


def ablation_variant(model, pairing, discriminator, seed=0):
    return VariantScorer(model, pairing, discriminator, seed=seed)


# -- datasets of labeled pairs ------------------------------------------------

@dataclass
class PairCorpus:
    """Labeled pairs resolved against their frames."""
    rows: list  # (patch_x, frame_x, patch_y, frame_y, label)

    @classmethod
    def from_frames(cls, frames, entries):
        index = {}
        for frame in frames:
            for patch in frame.patches:
                index[patch.patch_id] = (patch, frame)
        rows = []
        for e in entries:
            if e.patch_a not in index or e.patch_b not in index:
                raise KeyError("pair references unknown patch %r"
                               % (e.patch_a if e.patch_a not in index
                                  else e.patch_b))
            (px, fx), (py, fy) = index[e.patch_a], index[e.patch_b]
            rows.append((px, fx, py, fy, e.label))
        return cls(rows)

    def labels(self):
        return [r[4] for r in self.rows]


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    balance: bool = True


def _balanced_order(rows, rng, balance):
    """Epoch ordering; the minority class is resampled up to 1:1."""
    pos = [r for r in rows if r[4] == 1]
    neg = [r for r in rows if r[4] == 0]
    if not balance or not pos or not neg:
        order = list(rows)
        rng.shuffle(order)
        return order
    big, small = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    extra = [small[int(i)] for i in
             rng.integers(0, len(small), size=len(big) - len(small))]
    order = list(rows) + extra
    rng.shuffle(order)
    return order


def train(corpus, model, train_config, scorer=None):
    """Minibatch Adam on the information-distance loss.

    Returns (model, history) where history holds one mean loss per epoch.
    The model is mutated in place; pass a fresh one to keep the original.
    """
    rows = corpus.rows
    if not rows:
        raise ValueError("training corpus is empty")
    labels = {r[4] for r in rows}
    if len(labels) == 1:
        warnings.warn("training corpus has a single class (%s); the loss "
                      "is still defined but cannot contrast pairs"
                      % ("matched" if 1 in labels else "unmatched"))
    scorer = FlagshipScorer(model) if scorer is None else scorer
    params = scorer.trainable()
    state = ad.AdamState(lr=train_config.lr)
    rng = rng_for(train_config.seed, "train")
    history = []
    for _ in range(train_config.epochs):
        order = _balanced_order(rows, rng, train_config.balance)
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            cache = {}  # params change every step; cache lives one batch
            loss = loss_emp_id(batch, model, scorer=scorer, cache=cache)
            grads = ad.gradients(loss, params)
            ad.adam_step(params, grads, state)
            epoch_losses.append(float(loss.data))
        history.append(float(np.mean(epoch_losses)))
    return model, history


# -- evaluation ---------------------------------------------------------------

def _roc_auc(scores, labels):
    """Trapezoidal area under the ROC curve; tied scores move together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    npos = int(np.sum(labels == 1))
    nneg = int(np.sum(labels == 0))
    if npos == 0 or nneg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    auc = 0.0
    tp = fp = 0
    prev_tpr = prev_fpr = 0.0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            tp += int(labels[order[j]] == 1)
            fp += int(labels[order[j]] == 0)
            j += 1
        tpr, fpr = tp / npos, fp / nneg
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        prev_tpr, prev_fpr = tpr, fpr
        i = j
    return auc


def evaluate(corpus, model, gamma=None, scorer=None):
    """Precision/recall/F1 at the decision threshold plus ROC AUC.

    Undefined ratios (zero denominators) come back as 0.0 and are named in
    the ``undefined`` list.
    """
    if not corpus.rows:
        raise ValueError("empty test set")
    gamma = model.config.gamma if gamma is None else gamma
    scorer = FlagshipScorer(model) if scorer is None else scorer
    cache = {}
    scores, labels = [], []
    with ad.no_grad():
        for (px, fx, py, fy, label) in corpus.rows:
            d1, d2 = scorer.score_pair(px, fx, py, fy, cache)
            scores.append(0.5 * (float(d1.data) + float(d2.data)))
            labels.append(label)
    decisions = [int(s > gamma) for s in scores]
    tp = sum(1 for d, y in zip(decisions, labels) if d == 1 and y == 1)
    fp = sum(1 for d, y in zip(decisions, labels) if d == 1 and y == 0)
    fn = sum(1 for d, y in zip(decisions, labels) if d == 0 and y == 1)
    tn = sum(1 for d, y in zip(decisions, labels) if d == 0 and y == 0)
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2.0 * precision * recall, precision + recall, "f1")
    auc = _roc_auc(scores, labels)
    if auc is None:
        undefined.append("auc")
        auc = 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "auc": auc,
            "tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "undefined": undefined, "gamma": gamma,
            "scores": scores, "labels": labels}
