"""Folder-per-class dataset scanning and the ingest manifest.

Scanning is strict where training would later fail loudly: empty
classes, undecodable files, and mixed resolutions inside a class all
abort with the offending paths listed. The manifest is plain JSON and
byte-stable for an unchanged tree.
"""

import json
from dataclasses import dataclass
from pathlib import Path

from .core.conditioning import DEFAULT_PROMPT_TEMPLATE
from .errors import DatasetError

IMAGE_SUFFIXES = (".png",)


@dataclass(frozen=True)
class ClassSummary:
    name: str
    count: int
    resolution: tuple[int, int]  # (height, width)


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    classes: tuple[ClassSummary, ...]
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def to_json(self) -> str:
        payload = {
            "root": self.root,
            "prompt_template": self.prompt_template,
            "classes": [
                {"name": c.name, "count": c.count, "resolution": list(c.resolution)}
                for c in self.classes
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        data = json.loads(text)
        return DatasetManifest(
            root=data["root"],
            classes=tuple(
                ClassSummary(c["name"], c["count"], tuple(c["resolution"]))
                for c in data["classes"]
            ),
            prompt_template=data["prompt_template"],
        )


def scan_tree(root, prompt_template: str = DEFAULT_PROMPT_TEMPLATE) -> DatasetManifest:
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} contains no class folders")

    summaries = []
    broken: list[str] = []
    for class_dir in class_dirs:
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class {class_dir.name!r} has no images")
        sizes = set()
        for file in files:
            try:
                with Image.open(file) as img:
                    img.load()
                    sizes.add((img.height, img.width))
            except Exception:
                broken.append(str(file.relative_to(root)))
        if broken:
            continue
        if len(sizes) != 1:
            raise DatasetError(
                f"class {class_dir.name!r} mixes resolutions: {sorted(sizes)}"
            )
        summaries.append(ClassSummary(class_dir.name, len(files), sizes.pop()))
    if broken:
        raise DatasetError("undecodable images: " + ", ".join(broken))
    return DatasetManifest(root=str(root), classes=tuple(summaries), prompt_template=prompt_template)
