"""Draw exemplar overlays (region boxes, numbered centroids) for live model calls.

Palette, fixed so prompts can name the colors:

=======  ===========  ==========
region   color name   RGB
=======  ===========  ==========
ears     red          230,25,75
back     green        60,180,75
paws     blue         0,130,200
tail     orange       245,130,48
=======  ===========  ==========

Centroid numbers are drawn in yellow (255,225,25) with a black outline.
"""

from __future__ import annotations

import io
from pathlib import Path

from PIL import Image, ImageDraw

from ..clients.base import Attachment

PALETTE: dict[str, tuple[str, tuple[int, int, int]]] = {
    "ears": ("red", (230, 25, 75)),
    "back": ("green", (60, 180, 75)),
    "paws": ("blue", (0, 130, 200)),
    "tail": ("orange", (245, 130, 48)),
}
POINT_COLOR = (255, 225, 25)


def color_name(region: str) -> str:
    return PALETTE.get(region, ("white", (255, 255, 255)))[0]


def render_attachment(att: Attachment, max_side: int = 1024) -> bytes:
    """PNG bytes of the referenced image with overlays, cropped and downscaled."""
    with Image.open(Path(att.ref)) as img:
        img = img.convert("RGB")
    draw = ImageDraw.Draw(img)
    for label, rect in att.boxes:
        color = PALETTE.get(label, ("white", (255, 255, 255)))[1]
        draw.rectangle([rect.x0, rect.y0, rect.x1, rect.y1], outline=color, width=3)
    for index, x, y in att.points:
        draw.ellipse([x - 3, y - 3, x + 3, y + 3], outline=POINT_COLOR, width=2)
        draw.text((x + 5, y - 5), str(index), fill=POINT_COLOR, stroke_width=2, stroke_fill=(0, 0, 0))
    if att.crop is not None:
        c = att.crop
        img = img.crop((int(c.x0), int(c.y0), int(round(c.x1)), int(round(c.y1))))
    scale = max(img.size) / max_side
    if scale > 1:
        img = img.resize((int(img.width / scale), int(img.height / scale)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
