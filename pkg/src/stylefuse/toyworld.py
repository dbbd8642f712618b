"""Synthetic styled-shapes world: renderer, rule-based oracle, dataset.

Four styles (palette + fill pattern) crossed with four shapes give a
4x4 grid. Targets render the caption's shape in the style of a separate
reference image whose content always differs, which is what forces the
adapter to carry style rather than copy content. The oracle classifies
style from color-histogram plus autocorrelation signatures and content
from normalized cross-correlation against shape masks searched over the
render jitter range; it has no learned parameters.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, InvariantError, VocabularyError
from .tensor import RngStream

IMG_SIZE = 24
PATCH = 4
NUM_PATCHES = (IMG_SIZE // PATCH) ** 2  # 36 tokens
PATCH_DIM = PATCH * PATCH * 3  # 48 raw features per token

CAPTION_LEN = 4
VOCAB = ["<bos>", "<eos>", "shape", "circle", "square", "triangle", "cross"]
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

JITTER_PX = 2.0
SCALE_JITTER = 0.10
BG_BASE = np.array([0.93, 0.93, 0.90], dtype=np.float64)
BG_TINT = 0.04


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    name: str
    pattern: str  # solid | stripes | dots | checker
    primary: tuple[float, float, float]
    secondary: tuple[float, float, float]


@dataclass(frozen=True)
class ContentSpec:
    content_id: int
    shape: str
    caption: tuple[int, ...]


STYLES = [
    StyleSpec(0, "ember", "solid", (0.82, 0.12, 0.12), (0.55, 0.06, 0.06)),
    StyleSpec(1, "tide", "stripes", (0.15, 0.30, 0.85), (0.35, 0.80, 0.95)),
    StyleSpec(2, "meadow", "dots", (0.95, 0.85, 0.20), (0.10, 0.50, 0.20)),
    StyleSpec(3, "dusk", "checker", (0.55, 0.15, 0.75), (0.95, 0.55, 0.15)),
]

CONTENTS = [
    ContentSpec(0, "circle", (_WORD_TO_ID["<bos>"], _WORD_TO_ID["circle"],
                              _WORD_TO_ID["shape"], _WORD_TO_ID["<eos>"])),
    ContentSpec(1, "square", (_WORD_TO_ID["<bos>"], _WORD_TO_ID["square"],
                              _WORD_TO_ID["shape"], _WORD_TO_ID["<eos>"])),
    ContentSpec(2, "triangle", (_WORD_TO_ID["<bos>"], _WORD_TO_ID["triangle"],
                                _WORD_TO_ID["shape"], _WORD_TO_ID["<eos>"])),
    ContentSpec(3, "cross", (_WORD_TO_ID["<bos>"], _WORD_TO_ID["cross"],
                             _WORD_TO_ID["shape"], _WORD_TO_ID["<eos>"])),
]

NUM_STYLES = len(STYLES)
NUM_CONTENTS = len(CONTENTS)


def caption_for(word: str) -> np.ndarray:
    """Token ids for the fixed 4-token caption of a shape word."""
    for c in CONTENTS:
        if c.shape == word:
            return np.array(c.caption, dtype=np.int64)
    raise VocabularyError(
        f"unknown caption word {word!r}; vocabulary: {', '.join(c.shape for c in CONTENTS)}"
    )


def caption_tokens(content_id: int) -> np.ndarray:
    return np.array(CONTENTS[content_id].caption, dtype=np.int64)


# -- rendering ---------------------------------------------------------------


def shape_mask(shape: str, cx: float, cy: float, scale: float) -> np.ndarray:
    """Boolean [H, W] mask of the shape at the given center and scale."""
    ys, xs = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= (7.0 * scale) ** 2
    if shape == "square":
        h = 5.5 * scale
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "triangle":
        h, w = 6.5 * scale, 7.0 * scale
        top = cy - h
        return (dy >= -h) & (dy <= h) & (np.abs(dx) <= (ys - top) * (w / (2.0 * h)))
    if shape == "cross":
        arm, length = 2.0 * scale, 7.0 * scale
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= length)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= length)
        )
    raise ContractError(f"unknown shape {shape!r}")


def _pattern_layer(pattern: str) -> np.ndarray:
    """Boolean [H, W]; True picks the primary color, False the secondary."""
    ys, xs = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    if pattern == "solid":
        return np.ones((IMG_SIZE, IMG_SIZE), dtype=bool)
    if pattern == "stripes":
        return (ys // 2) % 2 == 0
    if pattern == "dots":
        return (ys % 4 < 2) & (xs % 4 < 2)
    if pattern == "checker":
        return ((xs // 3) + (ys // 3)) % 2 == 0
    raise ContractError(f"unknown pattern {pattern!r}")


def render(style_id: int, content_id: int, *, dx: float = 0.0, dy: float = 0.0,
           scale: float = 1.0, bg_tint=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Render one [H, W, 3] float image in [0, 1]."""
    style = STYLES[style_id]
    content = CONTENTS[content_id]
    bg = np.clip(BG_BASE + np.asarray(bg_tint, dtype=np.float64), 0.0, 1.0)
    img = np.tile(bg, (IMG_SIZE, IMG_SIZE, 1))
    mask = shape_mask(content.shape, 11.5 + dx, 11.5 + dy, scale)
    primary = _pattern_layer(style.pattern)
    fill = np.where(primary[..., None], np.array(style.primary), np.array(style.secondary))
    img[mask] = fill[mask]
    return img.astype(np.float32)


def render_jittered(style_id: int, content_id: int, rng: RngStream) -> np.ndarray:
    """Render with positional/size jitter and a per-sample background tint."""
    dx, dy = rng.uniform((2,), -JITTER_PX, JITTER_PX, dtype=np.float64)
    scale = 1.0 + float(rng.uniform((), -SCALE_JITTER, SCALE_JITTER, dtype=np.float64))
    tint = rng.uniform((3,), -BG_TINT, BG_TINT, dtype=np.float64)
    return render(style_id, content_id, dx=dx, dy=dy, scale=scale, bg_tint=tint)


# -- encoders (image side; the text table is learned and lives in the model) --


def image_to_patch_tokens(img: np.ndarray) -> np.ndarray:
    """Flatten 4x4 patches: [24, 24, 3] -> [1, 36, 48] raw tokens.

    Parameter-free; the learned projection into the model dimension is
    the style extractor's input projection.
    """
    img = np.asarray(img)
    if img.shape != (IMG_SIZE, IMG_SIZE, 3):
        raise DimensionError(f"expected image of shape {(IMG_SIZE, IMG_SIZE, 3)}, got {img.shape}")
    g = IMG_SIZE // PATCH
    tokens = (
        img.reshape(g, PATCH, g, PATCH, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(1, NUM_PATCHES, PATCH_DIM)
    )
    return np.ascontiguousarray(tokens, dtype=np.float32)


# -- the oracle ----------------------------------------------------------------


def _border_background(img: np.ndarray) -> np.ndarray:
    ring = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]], axis=0)
    return np.median(ring, axis=0)


def _foreground_distance(img: np.ndarray) -> np.ndarray:
    bg = _border_background(img)
    return np.sqrt(((img - bg) ** 2).sum(axis=-1))


@functools.lru_cache(maxsize=1)
def _content_templates() -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean, unit-norm shape masks over the jitter search window."""
    rows, labels = [], []
    shifts = range(-int(JITTER_PX), int(JITTER_PX) + 1)
    for content in CONTENTS:
        for s in (0.9, 1.0, 1.1):
            for sx in shifts:
                for sy in shifts:
                    m = shape_mask(content.shape, 11.5 + sx, 11.5 + sy, s).astype(np.float64)
                    m -= m.mean()
                    norm = np.linalg.norm(m)
                    rows.append((m / norm).reshape(-1))
                    labels.append(content.content_id)
    return np.stack(rows), np.array(labels)


def _autocorr_signature(img: np.ndarray, fg: np.ndarray) -> np.ndarray:
    """Lag-{2,3,4} horizontal+vertical autocorrelation of luminance on the
    foreground; solid fills (zero variance) correlate perfectly by convention."""
    lum = img.mean(axis=-1)
    sel = fg > 0.18
    if sel.sum() < 12:
        sel = np.ones_like(sel)
    mu = lum[sel].mean()
    var = lum[sel].var()
    feats = []
    for axis in (1, 0):  # horizontal then vertical
        for lag in (2, 3, 4):
            if axis == 1:
                a, b = lum[:, :-lag], lum[:, lag:]
                wa, wb = sel[:, :-lag], sel[:, lag:]
            else:
                a, b = lum[:-lag, :], lum[lag:, :]
                wa, wb = sel[:-lag, :], sel[lag:, :]
            both = wa & wb
            if var < 1e-6 or both.sum() < 8:
                feats.append(1.0 if var < 1e-6 else 0.0)
                continue
            feats.append(float(((a[both] - mu) * (b[both] - mu)).mean() / var))
    return np.array(feats)


def _color_histogram(img: np.ndarray, fg: np.ndarray) -> np.ndarray:
    sel = fg > 0.18
    if sel.sum() < 12:
        sel = np.ones_like(sel)
    q = np.minimum((img[sel] * 4).astype(int), 3)
    bins = q[:, 0] * 16 + q[:, 1] * 4 + q[:, 2]
    hist = np.bincount(bins, minlength=64).astype(np.float64)
    return hist / hist.sum()


def _style_features(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fg = _foreground_distance(img)
    return _color_histogram(img, fg), _autocorr_signature(img, fg)


@functools.lru_cache(maxsize=1)
def _style_prototypes() -> list[tuple[np.ndarray, np.ndarray]]:
    protos = []
    for style in STYLES:
        hists, acs = [], []
        for content in CONTENTS:
            img = render(style.style_id, content.content_id)
            h, a = _style_features(img)
            hists.append(h)
            acs.append(a)
        protos.append((np.mean(hists, axis=0), np.mean(acs, axis=0)))
    return protos


@dataclass(frozen=True)
class OracleResult:
    style_id: int
    content_id: int
    style_confidence: float
    content_confidence: float


def oracle_classify(img: np.ndarray) -> OracleResult:
    """Deterministic rule-based labels with confidences in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (IMG_SIZE, IMG_SIZE, 3):
        raise DimensionError(f"oracle expects {(IMG_SIZE, IMG_SIZE, 3)} images, got {img.shape}")
    # content: best normalized cross-correlation over the jitter window
    fgd = _foreground_distance(img)
    f = fgd - fgd.mean()
    norm = np.linalg.norm(f)
    templates, labels = _content_templates()
    if norm < 1e-9:
        content_id, content_conf = 0, 0.0
    else:
        scores = templates @ (f.reshape(-1) / norm)
        best = int(np.argmax(scores))
        content_id = int(labels[best])
        content_conf = float(np.clip(scores[best], 0.0, 1.0))
    # style: nearest palette/pattern statistics
    hist, ac = _style_features(img)
    dists = []
    for proto_hist, proto_ac in _style_prototypes():
        chi2 = 0.5 * np.sum((hist - proto_hist) ** 2 / (hist + proto_hist + 1e-9))
        dists.append(chi2 + 0.25 * np.linalg.norm(ac - proto_ac))
    order = np.argsort(dists)
    d1, d2 = dists[order[0]], dists[order[1]]
    style_conf = float(np.clip((d2 - d1) / (d2 + d1 + 1e-9), 0.0, 1.0))
    return OracleResult(int(order[0]), content_id, style_conf, content_conf)


# -- PPM I/O -------------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    """Binary 8-bit P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"PPM needs [H, W, 3], got {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise IOError(f"{path}: not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise IOError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3, offset=pos)
    return (pixels.reshape(height, width, 3).astype(np.float32)) / 255.0


# -- dataset -------------------------------------------------------------------


@dataclass
class ToySample:
    target: np.ndarray  # [H, W, 3] in [0, 1]
    style_ref: np.ndarray
    caption: np.ndarray  # token ids, length 4
    style_id: int
    content_id: int
    path: str = ""
    ref_path: str = ""


@dataclass
class ToyDataset:
    train: list[ToySample]
    holdout: list[ToySample]
    holdout_cells: list[tuple[int, int]]
    manifest_path: str = ""


def parse_holdout(spec: str) -> list[tuple[int, int]]:
    """Parse "s:c,s:c,..." holdout cell lists."""
    cells = []
    if not spec.strip():
        return cells
    for part in spec.split(","):
        s, _, c = part.strip().partition(":")
        try:
            cell = (int(s), int(c))
        except ValueError as e:
            raise ContractError(f"bad holdout cell {part!r}") from e
        if not (0 <= cell[0] < NUM_STYLES and 0 <= cell[1] < NUM_CONTENTS):
            raise ContractError(f"holdout cell {part!r} outside the {NUM_STYLES}x{NUM_CONTENTS} grid")
        cells.append(cell)
    return cells


def _check_trainable(holdout_cells: list[tuple[int, int]]) -> dict[int, list[int]]:
    held = set(holdout_cells)
    train_contents = {
        s: [c for c in range(NUM_CONTENTS) if (s, c) not in held] for s in range(NUM_STYLES)
    }
    for s, contents in train_contents.items():
        if len(contents) < 2:
            raise ContractError(
                f"holdout leaves style {s} with {len(contents)} training contents; "
                "need at least 2 so style references can differ in content"
            )
    for c in range(NUM_CONTENTS):
        if all((s, c) in held for s in range(NUM_STYLES)):
            raise ContractError(f"holdout removes content {c} from every style (untrainable)")
    return train_contents


def gen_dataset(samples_per_cell: int, rng: RngStream,
                holdout_cells: list[tuple[int, int]]) -> ToyDataset:
    """Render the full grid; holdout cells appear only in the holdout split.

    The style reference of every sample is a fresh render of the same
    style with a different (training) content. Every target is checked
    against the oracle at generation time.
    """
    if samples_per_cell < 1:
        raise ContractError(f"samples_per_cell must be >= 1, got {samples_per_cell}")
    train_contents = _check_trainable(holdout_cells)
    held = set(holdout_cells)
    train, holdout = [], []
    for s in range(NUM_STYLES):
        for c in range(NUM_CONTENTS):
            cell_rng = rng.child(f"cell{s}:{c}")
            ref_choices = [rc for rc in train_contents[s] if rc != c]
            for j in range(samples_per_cell):
                srng = cell_rng.child(j)
                target = render_jittered(s, c, srng.child("target"))
                ref_content = ref_choices[int(srng.integers(0, len(ref_choices), ()))]
                ref = render_jittered(s, ref_content, srng.child("ref"))
                label = oracle_classify(target)
                if (label.style_id, label.content_id) != (s, c):
                    raise InvariantError(
                        f"oracle mislabels clean render ({s},{c}) as "
                        f"({label.style_id},{label.content_id})"
                    )
                sample = ToySample(target, ref, caption_tokens(c), s, c)
                (holdout if (s, c) in held else train).append(sample)
    return ToyDataset(train=train, holdout=holdout, holdout_cells=list(holdout_cells))


def write_dataset(ds: ToyDataset, out_dir) -> str:
    """Write PPM pairs plus a manifest.tsv; returns the manifest path."""
    out = Path(out_dir)
    for split in ("train", "holdout"):
        (out / split).mkdir(parents=True, exist_ok=True)
    lines = []
    counters: dict[tuple[int, int], int] = {}
    for split, samples in (("train", ds.train), ("holdout", ds.holdout)):
        for sample in samples:
            idx = counters.get((sample.style_id, sample.content_id), 0)
            counters[(sample.style_id, sample.content_id)] = idx + 1
            stem = f"s{sample.style_id}c{sample.content_id}_{idx:03d}"
            sample.path = f"{split}/{stem}.ppm"
            sample.ref_path = f"{split}/{stem}_ref.ppm"
            write_ppm(out / sample.path, sample.target)
            write_ppm(out / sample.ref_path, sample.style_ref)
            toks = " ".join(str(t) for t in sample.caption)
            lines.append(
                f"{sample.path}\t{sample.style_id}\t{sample.content_id}\t{toks}\t{sample.ref_path}"
            )
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    ds.manifest_path = str(manifest)
    return str(manifest)


def load_dataset(data_dir) -> ToyDataset:
    """Read a dataset directory back via its manifest."""
    root = Path(data_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise IOError(f"no manifest.tsv under {root}")
    train, holdout, held = [], [], set()
    for line in manifest.read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        path, style_id, content_id, toks, ref_path = line.split("\t")
        sample = ToySample(
            target=read_ppm(root / path),
            style_ref=read_ppm(root / ref_path),
            caption=np.array([int(t) for t in toks.split()], dtype=np.int64),
            style_id=int(style_id),
            content_id=int(content_id),
            path=path,
            ref_path=ref_path,
        )
        if path.startswith("holdout/"):
            holdout.append(sample)
            held.add((sample.style_id, sample.content_id))
        else:
            train.append(sample)
    return ToyDataset(train=train, holdout=holdout, holdout_cells=sorted(held),
                      manifest_path=str(manifest))
