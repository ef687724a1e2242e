"""Image IO and the paired dataset folder layout (``input/``, ``gt/``, optional ``depth/``)."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .core import ImagePlane, InvalidInputError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class ImageDecodeError(InvalidInputError):
    pass


def read_rgb(path) -> ImagePlane:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    return ImagePlane(arr)


def to_uint8(img: ImagePlane) -> np.ndarray:
    return np.round(np.clip(img.data[..., :3], 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png8(path, img: ImagePlane) -> None:
    """Write an 8-bit RGB PNG via a temp file in the target folder, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.stem, suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(to_uint8(img)).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def list_images(folder) -> List[Path]:
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class ValidationReport:
    pairs: List[Tuple[Path, Path]] = field(default_factory=list)
    missing_gt: List[Path] = field(default_factory=list)
    missing_input: List[Path] = field(default_factory=list)
    undecodable: List[Tuple[Path, str]] = field(default_factory=list)
    size_mismatch: List[Tuple[Path, tuple, tuple]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.missing_gt or self.missing_input or self.undecodable or self.size_mismatch)

    def lines(self) -> List[str]:
        out = [f"{len(self.pairs)} pairs OK"]
        out += [f"missing gt: {p.name}" for p in self.missing_gt]
        out += [f"missing input: {p.name}" for p in self.missing_input]
        out += [f"decode error: {p} ({msg})" for p, msg in self.undecodable]
        out += [f"size mismatch: {p.name} input {a[1]}x{a[0]} vs gt {b[1]}x{b[0]}" for p, a, b in self.size_mismatch]
        return out


class DatasetLayout:
    """``root/input/*`` paired with same-named ``root/gt/*``."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset root {self.root} does not exist")
        self.input_dir = self.root / "input"
        self.gt_dir = self.root / "gt"
        self.depth_dir = self.root / "depth"
        if not self.input_dir.is_dir():
            raise FileNotFoundError(f"{self.input_dir} is missing")

    @property
    def paired(self) -> bool:
        return self.gt_dir.is_dir()

    def validate(self) -> ValidationReport:
        rep = ValidationReport()
        inputs = {p.name: p for p in list_images(self.input_dir)}
        gts = {p.name: p for p in list_images(self.gt_dir)} if self.paired else {}
        rep.missing_gt = [inputs[n] for n in sorted(inputs) if n not in gts]
        rep.missing_input = [gts[n] for n in sorted(gts) if n not in inputs]
        for name in sorted(inputs.keys() & gts.keys()):
            sizes = []
            for p in (inputs[name], gts[name]):
                try:
                    with Image.open(p) as im:
                        im.load()
                        sizes.append(im.size)
                except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                    rep.undecodable.append((p, str(exc)))
            if len(sizes) < 2:
                continue
            if sizes[0] != sizes[1]:
                rep.size_mismatch.append((inputs[name], sizes[0], sizes[1]))
            else:
                rep.pairs.append((inputs[name], gts[name]))
        return rep

    def load_pairs(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """Decode every clean pair to ``[3, H, W]`` float tensors; raises on any problem."""
        rep = self.validate()
        if not rep.clean:
            raise InvalidInputError("dataset is not clean:\n  " + "\n  ".join(rep.lines()[1:]))
        if not rep.pairs:
            raise InvalidInputError(f"no image pairs under {self.root}")
        return [(read_rgb(a).to_tensor()[0], read_rgb(b).to_tensor()[0]) for a, b in rep.pairs]
