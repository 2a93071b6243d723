"""Nearest-neighbor style guidance and the coarse (feature + color) losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch

from .features import NORM_EPS, ExtractorWeights, FeatureMap, cosine_distance, downsample, extract


def concat_width(maps: Sequence):
    """Concatenate (h, w, c) maps side by side; FeatureMaps keep their provenance."""
    if len(maps) == 0:
        raise ValueError("nothing to concatenate")
    datas = [m.data if isinstance(m, FeatureMap) else m for m in maps]
    h, c = datas[0].shape[0], datas[0].shape[2]
    for d in datas:
        if d.shape[0] != h or d.shape[2] != c:
            raise ValueError("maps differ in height or channel count")
    out = torch.cat(datas, dim=1)
    if isinstance(maps[0], FeatureMap):
        return FeatureMap(out, "+".join(m.source for m in maps), maps[0].extractor)
    return out


def split_index(q: int, widths: Sequence[int]):
    """Global column ``q`` of a width-concatenated stack -> (map index, local column)."""
    for j, w in enumerate(widths):
        if q < w:
            return j, q
        q -= w
    raise IndexError("column outside the stack")


@dataclass
class GuidanceMaps:
    features: torch.Tensor  # (h, w, c)
    index_map: torch.Tensor  # (h, w, 2) long: (p*, q*) into the stack
    colors: torch.Tensor  # (h, w, 3)
    extractor: str = ""


def _unit(x):
    n = x.norm(dim=-1, keepdim=True)
    return torch.where(n < NORM_EPS, torch.zeros_like(x), x / torch.where(n < NORM_EPS, torch.ones_like(n), n))


def nearest_cells(content: torch.Tensor, stack: torch.Tensor, chunk: int = 4096):
    """Flat argmin of cosine distance from each content cell to every stack cell.

    Ties resolve to the first stack cell in row-major order; a ~zero vector on
    either side has distance 0 to everything.
    """
    c = content.reshape(-1, content.shape[-1])
    s = stack.reshape(-1, stack.shape[-1])
    cu, su = _unit(c), _unit(s)
    c_zero = c.norm(dim=-1) < NORM_EPS
    s_zero = s.norm(dim=-1) < NORM_EPS
    out = []
    for i in range(0, c.shape[0], chunk):
        d = 1.0 - cu[i:i + chunk] @ su.T
        d = torch.where(s_zero[None, :], torch.zeros_like(d), d)
        d = torch.where(c_zero[i:i + chunk, None], torch.zeros_like(d), d)
        out.append(torch.argmin(d, dim=1))
    return torch.cat(out)


def build_guidance(content_feat, ref_content_feats: Sequence, ref_style_feats: Sequence,
                   ref_style_images_downsampled: Sequence) -> GuidanceMaps:
    """Reassign keyframe style features (and colors) to the content layout."""
    if len(ref_content_feats) == 0:
        raise ValueError("empty reference list")
    if not (len(ref_content_feats) == len(ref_style_feats) == len(ref_style_images_downsampled)):
        raise ValueError("reference lists differ in length")
    content = content_feat.data if isinstance(content_feat, FeatureMap) else content_feat
    ref_c = concat_width(ref_content_feats)
    ref_s = concat_width(ref_style_feats)
    ref_c = ref_c.data if isinstance(ref_c, FeatureMap) else ref_c
    ref_s = ref_s.data if isinstance(ref_s, FeatureMap) else ref_s
    if ref_c.shape != ref_s.shape:
        raise ValueError("content and style reference stacks differ in shape")
    colors = concat_width(list(ref_style_images_downsampled))
    if colors.shape[:2] != ref_c.shape[:2]:
        raise ValueError("downsampled style images must match the feature resolution")
    flat = nearest_cells(content, ref_c)
    width = ref_c.shape[1]
    p, q = flat // width, flat % width
    h, w = content.shape[:2]
    extractor = content_feat.extractor if isinstance(content_feat, FeatureMap) else ""
    return GuidanceMaps(ref_s[p, q].reshape(h, w, -1), torch.stack([p, q], dim=-1).reshape(h, w, 2),
                        colors[p, q].reshape(h, w, -1), extractor)


def feature_loss(rendered_feat, guidance_feat, content_feat, lam: float = 5e-3):
    """Per-cell mean of cosine distance to the guidance plus ``lam`` times squared content error."""
    r = rendered_feat.data if isinstance(rendered_feat, FeatureMap) else rendered_feat
    g = guidance_feat.data if isinstance(guidance_feat, FeatureMap) else guidance_feat
    c = content_feat.data if isinstance(content_feat, FeatureMap) else content_feat
    if not (r.shape == g.shape == c.shape):
        raise ValueError("feature maps differ in shape")
    style = cosine_distance(g, r)
    content = ((c - r) ** 2).sum(dim=-1)
    return (style + lam * content).mean()


def color_loss(rendered_downsampled, color_guidance):
    """Sum over channels, mean over cells of the squared color error."""
    if rendered_downsampled.shape != color_guidance.shape:
        raise ValueError("color maps differ in shape")
    return ((rendered_downsampled - color_guidance) ** 2).sum(dim=-1).mean()


def coarse_loss(rendered_image, guidance: GuidanceMaps, content_feat, extractor: ExtractorWeights,
                lambda_feat: float = 1.0, lambda_color: float = 5.0, lam: float = 5e-3):
    """``lambda_feat * feature_loss + lambda_color * color_loss`` of a rendered image."""
    if guidance.extractor and guidance.extractor != extractor.ident:
        raise ValueError("guidance was built with a different extractor")
    if isinstance(content_feat, FeatureMap) and content_feat.extractor and content_feat.extractor != extractor.ident:
        raise ValueError("content features come from a different extractor")
    feat = extract(rendered_image, extractor)
    h, w = feat.data.shape[:2]
    small = downsample(rendered_image, (h, w))
    return lambda_feat * feature_loss(feat, guidance.features, content_feat, lam) + \
        lambda_color * color_loss(small, guidance.colors)


def coarse_loss_terms(rendered_image, guidance: GuidanceMaps, content_feat, extractor: ExtractorWeights,
                      lam: float = 5e-3):
    feat = extract(rendered_image, extractor)
    small = downsample(rendered_image, feat.data.shape[:2])
    return feature_loss(feat, guidance.features, content_feat, lam), color_loss(small, guidance.colors)
