# app/episodes/episode_dir.py
"""
On-disk episode directories.

    manifest.txt           N, K, n_query, class_ids as `key = value` lines
    support_<i>_img.ppm    i = 0 .. N*K - 1, class-major
    support_<i>_mask.pgm   pixel value = task label (0 background, 1..N)
    query_<j>_img.ppm      j = 0 .. n_query - 1
    query_<j>_mask.pgm     optional
"""
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.episodes.netpbm import read_pgm_labels, read_ppm, write_pgm_labels, write_ppm
from app.episodes.synthetic import Episode
from app.errors import FormatError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
_REQUIRED_KEYS = ("N", "K", "n_query", "class_ids")


def _parse_manifest(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise FormatError(f"{path}: cannot read manifest ({e})") from e
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _REQUIRED_KEYS:
            raise FormatError(f"{path}:{lineno}: unknown manifest key {key!r}")
        if key in values:
            raise FormatError(f"{path}:{lineno}: duplicate manifest key {key!r}")
        values[key] = value
    missing = [k for k in _REQUIRED_KEYS if k not in values]
    if missing:
        raise FormatError(f"{path}: manifest is missing {', '.join(missing)}")
    return values


def _manifest_ints(path: str, values: Dict[str, str]) -> Tuple[int, int, int, List[int]]:
    try:
        n_way, k_shot, n_query = int(values["N"]), int(values["K"]), int(values["n_query"])
        class_ids = [int(c) for c in values["class_ids"].split(",") if c.strip()]
    except ValueError as e:
        raise FormatError(f"{path}: manifest values must be integers ({e})") from e
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise FormatError(f"{path}: N, K and n_query must be >= 1, got {n_way}, {k_shot}, {n_query}")
    if len(class_ids) != n_way:
        raise FormatError(f"{path}: class_ids lists {len(class_ids)} classes but N = {n_way}")
    return n_way, k_shot, n_query, class_ids


def _require(path: str) -> str:
    if not os.path.isfile(path):
        raise FormatError(f"{path}: missing episode file")
    return path


def _check_mask(path: str, mask: np.ndarray, size: Tuple[int, int], n_way: int) -> None:
    if mask.shape != size:
        raise FormatError(f"{path}: mask is {mask.shape[1]}x{mask.shape[0]}, image is {size[1]}x{size[0]}")
    if mask.max() > n_way:
        raise FormatError(f"{path}: mask label {int(mask.max())} exceeds manifest N = {n_way}")


def load_episode_dir(path: str) -> Episode:
    n_way, k_shot, n_query, class_ids = _manifest_ints(
        os.path.join(path, MANIFEST), _parse_manifest(os.path.join(path, MANIFEST))
    )
    size: Optional[Tuple[int, int]] = None

    def image(name: str) -> np.ndarray:
        nonlocal size
        file = _require(os.path.join(path, name))
        img = read_ppm(file)
        if size is None:
            size = img.shape[:2]
        elif img.shape[:2] != size:
            raise FormatError(
                f"{file}: image is {img.shape[1]}x{img.shape[0]}, expected {size[1]}x{size[0]} like the first image"
            )
        return img

    support = []
    for i in range(n_way * k_shot):
        img = image(f"support_{i}_img.ppm")
        mask_file = _require(os.path.join(path, f"support_{i}_mask.pgm"))
        mask = read_pgm_labels(mask_file)
        _check_mask(mask_file, mask, size, n_way)
        support.append((img, mask))

    query = []
    for j in range(n_query):
        img = image(f"query_{j}_img.ppm")
        mask_file = os.path.join(path, f"query_{j}_mask.pgm")
        mask = None
        if os.path.isfile(mask_file):
            mask = read_pgm_labels(mask_file)
            _check_mask(mask_file, mask, size, n_way)
        query.append((img, mask))

    try:
        episode = Episode(support=support, query=query, class_ids=class_ids, n_way=n_way, k_shot=k_shot)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    logger.debug("loaded %d-way %d-shot episode with %d queries from %s", n_way, k_shot, n_query, path)
    return episode


def save_episode_dir(episode: Episode, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"N = {episode.n_way}\n")
        fh.write(f"K = {episode.k_shot}\n")
        fh.write(f"n_query = {len(episode.query)}\n")
        fh.write(f"class_ids = {','.join(str(c) for c in episode.class_ids)}\n")
    for i, (img, mask) in enumerate(episode.support):
        write_ppm(os.path.join(path, f"support_{i}_img.ppm"), img)
        write_pgm_labels(os.path.join(path, f"support_{i}_mask.pgm"), mask)
    for j, (img, mask) in enumerate(episode.query):
        write_ppm(os.path.join(path, f"query_{j}_img.ppm"), img)
        if mask is not None:
            write_pgm_labels(os.path.join(path, f"query_{j}_mask.pgm"), mask)
