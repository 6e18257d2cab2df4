"""Dataset manifests (CSV) and turning them into in-memory datasets."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import MultimodalDataset, gtg_stats_vector, load_face_embedding
from .errors import AVFusionError, DataError
from .formats import read_pgm
from .frontend import (
    FrontendConfig,
    apply_cmvn,
    apply_vad,
    compute_gammatonegram,
    compute_mfcc,
    load_wav,
    render_gammatonegram_image,
)
from .imaging import vector_heatmap

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["utt_id", "speaker_id", "wav_path", "face_emb_path"]
VOICE_IMAGE_SIZE = (112, 224)  # height, width
FACE_IMAGE_SIDE = 32


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    speaker_id: str
    wav_path: str
    face_emb_path: str


@dataclass
class Manifest:
    rows: list
    base_dir: Path

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def __len__(self) -> int:
        return len(self.rows)


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        rows, seen = [], set()
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields")
            row = ManifestRow(*rec)
            if not row.speaker_id:
                raise DataError(f"{path}:{lineno}: empty speaker_id")
            if row.utt_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate utt_id {row.utt_id!r}")
            seen.add(row.utt_id)
            rows.append(row)
    return Manifest(rows, path.parent)


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([r.utt_id, r.speaker_id, r.wav_path, r.face_emb_path])


def _process(args):
    row, wav, face_path, cfg = args
    try:
        clip = apply_vad(load_wav(wav), cfg)
        frames = apply_cmvn(compute_mfcc(clip, cfg)).values
        gtg = compute_gammatonegram(clip, cfg)
        face = load_face_embedding(face_path).values
        pgm = Path(face_path).with_suffix(".pgm")
        face_img = read_pgm(pgm) if pgm.exists() else vector_heatmap(face, FACE_IMAGE_SIDE, float(np.abs(face).max()))
        voice_img = render_gammatonegram_image(gtg, VOICE_IMAGE_SIZE[1], VOICE_IMAGE_SIZE[0])
        return row.utt_id, (frames, gtg_stats_vector(gtg), face, face_img, voice_img), None
    except (AVFusionError, OSError) as exc:
        return row.utt_id, None, f"{type(exc).__name__}: {exc}"


def load_dataset(manifest: Manifest, cfg: FrontendConfig | None = None, jobs: int = 1) -> MultimodalDataset:
    """Run the front-end over every manifest row; raises DataError listing failed utterances."""
    cfg = cfg or FrontendConfig()
    if not manifest.rows:
        raise DataError("manifest is empty")
    tasks = [(r, manifest.resolve(r.wav_path), manifest.resolve(r.face_emb_path), cfg) for r in manifest.rows]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_process, tasks))
    else:
        results = [_process(t) for t in tasks]
    failures = [(u, err) for u, _, err in results if err]
    if failures:
        detail = "; ".join(f"{u}: {e}" for u, e in failures)
        raise DataError(f"{len(failures)} utterance(s) failed: {detail}")
    class_names = sorted({r.speaker_id for r in manifest.rows})
    index = {s: i for i, s in enumerate(class_names)}
    outs = [o for _, o, _ in results]
    face_dims = {o[2].size for o in outs}
    if len(face_dims) != 1:
        raise DataError(f"face embeddings have mixed dimensions {sorted(face_dims)}")
    return MultimodalDataset(
        utt_ids=[r.utt_id for r in manifest.rows],
        labels=np.array([index[r.speaker_id] for r in manifest.rows], dtype=np.int64),
        class_names=class_names,
        face=np.stack([o[2] for o in outs]),
        voice=np.stack([o[1] for o in outs]),
        voice_frames=[o[0] for o in outs],
        face_images=[o[3] for o in outs],
        voice_images=[o[4] for o in outs],
    )
