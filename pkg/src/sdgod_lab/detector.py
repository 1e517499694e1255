"""Miniature two-stage detector: conv backbone, RPN, pooled ROI head.

Also hosts the cross-domain proposal machinery: averaging the RPN losses of the
clean and augmented views, and concatenating both views' proposals for the
ROI stage.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import grad as G
from .structures import BoxF, box_iou_matrix

ORI, AUG = "ori", "aug"


@dataclass
class DetectorConfig:
    n_classes: int = 3
    channels: tuple = (8, 16, 32)
    anchor_scales: tuple = (12.0, 24.0, 40.0)
    rpn_hidden: int = 32
    roi_hidden: int = 128
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64                 # sampled anchors per image; 0 keeps every labeled anchor
    rpn_pos_fraction: float = 0.5
    rpn_beta: float = 1.0 / 9.0
    proposals: int = 64
    proposal_nms: float = 0.7
    min_proposal_size: float = 1.0
    roi_batch: int = 32                 # sampled ROIs per image and view
    roi_pos_fraction: float = 0.25      # 1:3 positive:negative
    roi_iou: float = 0.5
    roi_add_gt: bool = True
    roi_box_weights: tuple = (10.0, 10.0, 5.0, 5.0)
    stride: int = 8

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.roi_box_weights = tuple(float(w) for w in self.roi_box_weights)


# ------------------------------------------------------------------ box utils


def encode_boxes(gt, ref, weights=(1.0, 1.0, 1.0, 1.0)):
    wx, wy, ww, wh = weights
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return np.stack([wx * (gx - rx) / rw, wy * (gy - ry) / rh, ww * np.log(gw / rw), wh * np.log(gh / rh)], axis=1)


def decode_boxes(deltas, ref, weights=(1.0, 1.0, 1.0, 1.0), clip=np.log(1000.0 / 16)):
    wx, wy, ww, wh = weights
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw, dh = np.minimum(deltas[:, 2] / ww, clip), np.minimum(deltas[:, 3] / wh, clip)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * np.exp(dw), rh * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, height, width):
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def nms(boxes, scores, iou_threshold):
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    if order.size == 0:
        return np.zeros(0, dtype=np.intp)
    ious = box_iou_matrix(boxes[order], boxes[order])
    alive = np.ones(order.size, dtype=bool)
    keep = []
    for i in range(order.size):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= ious[i, i + 1:] <= iou_threshold
    return np.array(keep, dtype=np.intp)


def make_anchors(feat_h, feat_w, stride, scales, height, width):
    """One square anchor per cell and scale, centered on the stride grid, clipped to the image.

    Row order is (cell_y, cell_x, scale), matching the RPN head output layout.
    """
    cy = (np.arange(feat_h) + 0.5) * stride
    cx = (np.arange(feat_w) + 0.5) * stride
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    half = np.asarray(scales)[None, None, :] / 2
    a = np.stack([xx[..., None] - half, yy[..., None] - half, xx[..., None] + half, yy[..., None] + half], axis=-1)
    return clip_boxes(a.reshape(-1, 4), height, width)


@dataclass
class ProposalSet:
    boxes: np.ndarray
    scores: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.provenance = np.asarray(self.provenance, dtype="<U3").reshape(-1)
        if not (len(self.boxes) == len(self.scores) == len(self.provenance)):
            raise ValueError("proposal fields have different lengths")

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype="<U3"))


@dataclass
class RpnLossPair:
    l_ori: G.Tensor
    l_aug: G.Tensor


def cprm_refine(pair: RpnLossPair) -> G.Tensor:
    """Mean of the clean-view and augmented-view RPN losses; replaces the single RPN loss."""
    return G.tag(G.scale(G.add(pair.l_aug, pair.l_ori), 0.5), "cprm_refine")


def cprm_mix(r_ori: ProposalSet, r_aug: ProposalSet) -> ProposalSet:
    """Concatenate both views' proposals, keep provenance, re-sort by score (stable)."""
    boxes = np.concatenate([r_ori.boxes, r_aug.boxes])
    scores = np.concatenate([r_ori.scores, r_aug.scores])
    prov = np.concatenate([r_ori.provenance, r_aug.provenance])
    order = np.argsort(-scores, kind="stable")
    return ProposalSet(boxes[order], scores[order], prov[order])


def total_loss(l_roi, l_cprm, l_crfi, alpha):
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    out = G.add(l_roi, l_cprm)
    if l_crfi is not None:
        out = G.add(out, G.scale(l_crfi, alpha))
    return G.tag(out, "total")


# ------------------------------------------------------------------- layers


@lru_cache(maxsize=64)
def _im2col_index(b, h, w, c):
    """Flat gather indices turning (b, h, w, c) into (b*h*w, 9*c) 3x3 patches; -1 marks padding."""
    ys, xs = np.arange(h), np.arange(w)
    idx = np.full((b, h, w, 3, 3, c), -1, dtype=np.intp)
    for dy in range(3):
        for dx in range(3):
            sy, sx = ys + dy - 1, xs + dx - 1
            vy, vx = (sy >= 0) & (sy < h), (sx >= 0) & (sx < w)
            flat = ((np.arange(b)[:, None, None] * h + sy[None, :, None]) * w + sx[None, None, :])[..., None] * c \
                + np.arange(c)
            ok = (vy[None, :, None] & vx[None, None, :])[..., None]
            idx[:, :, :, dy, dx, :] = np.where(ok, flat, -1)
    idx = idx.reshape(b * h * w, 9 * c)
    idx.setflags(write=False)
    return idx


def conv3x3(x, weight, bias):
    """Same-padded 3x3 convolution of an NHWC tensor via im2col + matmul."""
    b, h, w, c = x.shape
    if weight.shape[0] != 9 * c:
        raise G.ShapeError("conv3x3", x.shape, weight.shape)
    if not (G.is_grad_enabled() and (x.requires_grad or weight.requires_grad)):
        return G.Tensor(_conv3x3_array(x.data, weight.data, bias.data))
    cols = G.gather_flat(x, _im2col_index(b, h, w, c))
    out = G.add(G.matmul(cols, weight), bias)
    return G.reshape(out, (b, h, w, weight.shape[1]))


def _conv3x3_array(x, weight, bias):
    """Plain-array convolution for inference: one matmul per kernel tap over shifted views."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = weight.reshape(3, 3, c, -1)
    out = np.broadcast_to(bias, (b, h, w, taps.shape[-1])).copy()
    for dy in range(3):
        for dx in range(3):
            out += xp[:, dy:dy + h, dx:dx + w] @ taps[dy, dx]
    return out


def avg_pool2(x):
    b, h, w, c = x.shape
    return G.mean(G.reshape(x, (b, h // 2, 2, w // 2, 2, c)), axis=(2, 4))


def _pad_to_stride(images, stride):
    b, h, w, _ = images.shape
    ph, pw = -h % stride, -w % stride
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)))
    return images


def _he(rng, fan_in, shape):
    return G.Tensor(rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def roi_pool_weights(boxes, feat_h, feat_w, stride):
    """(R, 4, feat_h*feat_w) weights averaging each box's 2x2 bins over feature cells.

    Each bin is the area-weighted mean of the cells it overlaps in feature coordinates.
    """
    r = len(boxes)
    fb = boxes / stride
    ey = np.stack([fb[:, 1], (fb[:, 1] + fb[:, 3]) / 2, fb[:, 3]], axis=1)
    ex = np.stack([fb[:, 0], (fb[:, 0] + fb[:, 2]) / 2, fb[:, 2]], axis=1)

    def overlaps(edges, n):
        lo, hi = edges[:, :2, None], edges[:, 1:, None]
        cells = np.arange(n)[None, None, :]
        ov = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0, None)
        size = ov.sum(axis=2, keepdims=True)
        # a bin of zero extent takes the cell containing it
        empty = size[..., 0] <= 0
        if empty.any():
            pos = np.clip(np.floor(lo[..., 0]).astype(int), 0, n - 1)
            ov[empty] = 0.0
            ri, bi = np.nonzero(empty)
            ov[ri, bi, pos[ri, bi]] = 1.0
            size = ov.sum(axis=2, keepdims=True)
        return ov / size

    oy, ox = overlaps(ey, feat_h), overlaps(ex, feat_w)
    return (oy[:, :, None, :, None] * ox[:, None, :, None, :]).reshape(r, 4, feat_h * feat_w)


def roi_pool_matrix(boxes, image_index, n_images, feat_h, feat_w, stride):
    """Dense (R*4, n_images*feat_h*feat_w) form of the pooling weights, for the differentiable path."""
    r = len(boxes)
    wgt = roi_pool_weights(boxes, feat_h, feat_w, stride).reshape(r * 4, feat_h * feat_w)
    full = np.zeros((r * 4, n_images * feat_h * feat_w))
    cols = np.asarray(image_index)[:, None] * (feat_h * feat_w) + np.arange(feat_h * feat_w)[None, :]
    full[np.arange(r * 4)[:, None], np.repeat(cols, 4, axis=0)] = wgt
    return full


# -------------------------------------------------------------------- model


class ToyDetector:
    def __init__(self, cfg: DetectorConfig, rng):
        self.cfg = cfg
        p = {}
        cin = 3
        for i, cout in enumerate(cfg.channels):
            p[f"backbone.conv{i}.weight"] = _he(rng, 9 * cin, (9 * cin, cout))
            p[f"backbone.conv{i}.bias"] = G.Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        a = len(cfg.anchor_scales)
        p["rpn.conv.weight"] = _he(rng, 9 * cin, (9 * cin, cfg.rpn_hidden))
        p["rpn.conv.bias"] = G.Tensor(np.zeros(cfg.rpn_hidden), requires_grad=True)
        p["rpn.obj.weight"] = G.Tensor(rng.normal(scale=0.01, size=(cfg.rpn_hidden, a)), requires_grad=True)
        p["rpn.obj.bias"] = G.Tensor(np.zeros(a), requires_grad=True)
        p["rpn.delta.weight"] = G.Tensor(rng.normal(scale=0.01, size=(cfg.rpn_hidden, 4 * a)), requires_grad=True)
        p["rpn.delta.bias"] = G.Tensor(np.zeros(4 * a), requires_grad=True)
        p["roi.fc.weight"] = _he(rng, 4 * cin, (4 * cin, cfg.roi_hidden))
        p["roi.fc.bias"] = G.Tensor(np.zeros(cfg.roi_hidden), requires_grad=True)
        p["roi.cls.weight"] = G.Tensor(rng.normal(scale=0.01, size=(cfg.roi_hidden, cfg.n_classes + 1)),
                                       requires_grad=True)
        p["roi.cls.bias"] = G.Tensor(np.zeros(cfg.n_classes + 1), requires_grad=True)
        p["roi.reg.weight"] = G.Tensor(rng.normal(scale=0.001, size=(cfg.roi_hidden, 4)), requires_grad=True)
        p["roi.reg.bias"] = G.Tensor(np.zeros(4), requires_grad=True)
        self.params = p

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return dict(self.params)

    # ---- backbone

    def backbone(self, images):
        """(B, H, W, 3) images -> (B, ceil(H/8), ceil(W/8), C) feature tensor."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        x = G.Tensor(_pad_to_stride(images, self.cfg.stride))
        for i in range(len(self.cfg.channels)):
            x = conv3x3(x, self.params[f"backbone.conv{i}.weight"], self.params[f"backbone.conv{i}.bias"])
            x = avg_pool2(G.relu(x))
        return x

    def anchors_for(self, features, height, width):
        _, fh, fw, _ = features.shape
        return make_anchors(fh, fw, self.cfg.stride, self.cfg.anchor_scales, height, width)

    # ---- RPN

    def rpn_head(self, features):
        b, fh, fw, _ = features.shape
        if fh == 0 or fw == 0:
            raise ValueError("empty feature map")
        p = self.params
        h = G.relu(conv3x3(features, p["rpn.conv.weight"], p["rpn.conv.bias"]))
        flat = G.reshape(h, (b * fh * fw, self.cfg.rpn_hidden))
        a = len(self.cfg.anchor_scales)
        logits = G.reshape(G.add(G.matmul(flat, p["rpn.obj.weight"]), p["rpn.obj.bias"]), (b, fh * fw * a))
        deltas = G.reshape(G.add(G.matmul(flat, p["rpn.delta.weight"]), p["rpn.delta.bias"]), (b, fh * fw * a, 4))
        return logits, deltas

    def assign_anchors(self, anchors, gt_boxes):
        """Anchor labels (1 positive, 0 negative, -1 ignored) and matched GT index."""
        cfg = self.cfg
        labels = np.full(len(anchors), -1, dtype=np.int64)
        if len(gt_boxes) == 0:
            labels[:] = 0
            return labels, np.zeros(len(anchors), dtype=np.intp)
        iou = box_iou_matrix(anchors, gt_boxes)
        best = iou.max(axis=1)
        matched = iou.argmax(axis=1)
        labels[best <= cfg.rpn_neg_iou] = 0
        labels[best >= cfg.rpn_pos_iou] = 1
        per_gt = iou.max(axis=0)
        for g in np.nonzero(per_gt > 0)[0]:
            hits = np.nonzero(iou[:, g] == per_gt[g])[0]
            labels[hits] = 1
            matched[hits] = g
        return labels, matched

    def _sample(self, labels, batch, pos_fraction, rng):
        pos, neg = np.nonzero(labels == 1)[0], np.nonzero(labels == 0)[0]
        if batch <= 0 or rng is None:
            return pos, neg
        n_pos = min(len(pos), int(batch * pos_fraction))
        n_neg = min(len(neg), batch - n_pos)
        return np.sort(rng.permutation(pos)[:n_pos]), np.sort(rng.permutation(neg)[:n_neg])

    def rpn_forward(self, features, anchors, gt_boxes, image_size, rng=None, view=ORI, tag=None):
        """Proposals per image and the RPN loss (objectness BCE + smooth-L1 on positive anchors)."""
        logits, deltas = self.rpn_head(features)
        b = logits.shape[0]
        n_a = len(anchors)
        h, w = image_size
        obj_w = np.zeros((b, n_a))
        reg_w = np.zeros((b, n_a, 1))
        obj_t = np.zeros((b, n_a))
        reg_t = np.zeros((b, n_a, 4))
        for i in range(b):
            labels, matched = self.assign_anchors(anchors, gt_boxes[i])
            pos, neg = self._sample(labels, self.cfg.rpn_batch, self.cfg.rpn_pos_fraction, rng)
            obj_w[i, pos] = obj_w[i, neg] = 1.0
            obj_t[i, pos] = 1.0
            if len(pos):
                reg_w[i, pos] = 1.0
                reg_t[i, pos] = encode_boxes(gt_boxes[i][matched[pos]], anchors[pos])
        n_obj = max(obj_w.sum(), 1.0)
        n_pos = max(reg_w.sum(), 1.0)
        l_obj = G.sum(G.mul(G.bce_with_logits(logits, obj_t, reduction="none"), obj_w / n_obj))
        l_reg = G.sum(G.mul(G.smooth_l1(deltas, reg_t, beta=self.cfg.rpn_beta, reduction="none"), reg_w / n_pos))
        loss = G.add(l_obj, l_reg)
        if tag:
            loss = G.tag(loss, tag)
        proposals = [self.make_proposals(logits.data[i], deltas.data[i], anchors, h, w, view) for i in range(b)]
        return proposals, loss

    def make_proposals(self, logits, deltas, anchors, height, width, view=ORI):
        cfg = self.cfg
        boxes = clip_boxes(decode_boxes(deltas, anchors), height, width)
        scores = 1.0 / (1.0 + np.exp(-logits))
        ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_proposal_size) & \
            ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_proposal_size)
        boxes, scores = boxes[ok], scores[ok]
        keep = nms(boxes, scores, cfg.proposal_nms)[: cfg.proposals]
        return ProposalSet(boxes[keep], scores[keep], np.full(len(keep), view))

    # ---- ROI head

    def roi_logits(self, features_flat, n_images, feat_hw, boxes, image_index):
        fh, fw = feat_hw
        pool = roi_pool_matrix(boxes, image_index, n_images, fh, fw, self.cfg.stride)
        c = features_flat.shape[1]
        pooled = G.reshape(G.matmul(G.Tensor(pool), features_flat), (len(boxes), 4 * c))
        return self.roi_head(pooled)

    def roi_head(self, pooled):
        p = self.params
        h = G.relu(G.add(G.matmul(pooled, p["roi.fc.weight"]), p["roi.fc.bias"]))
        cls = G.add(G.matmul(h, p["roi.cls.weight"]), p["roi.cls.bias"])
        reg = G.add(G.matmul(h, p["roi.reg.weight"]), p["roi.reg.bias"])
        return cls, reg

    def roi_targets(self, proposals, gt_boxes, gt_labels, rng=None):
        """Sample ROIs 1:3 pos:neg at the ROI IoU threshold; labels are class+1, 0 = background."""
        cfg = self.cfg
        boxes = proposals
        if len(gt_boxes):
            iou = box_iou_matrix(boxes, gt_boxes)
            best, matched = iou.max(axis=1), iou.argmax(axis=1)
        else:
            best, matched = np.zeros(len(boxes)), np.zeros(len(boxes), dtype=np.intp)
        labels = np.where(best >= cfg.roi_iou, 1, 0)
        pos, neg = self._sample(labels, cfg.roi_batch, cfg.roi_pos_fraction, rng)
        keep = np.concatenate([pos, neg])
        cls_t = np.zeros(len(keep), dtype=np.int64)
        reg_t = np.zeros((len(keep), 4))
        if len(pos):
            cls_t[: len(pos)] = gt_labels[matched[pos]] + 1
            reg_t[: len(pos)] = encode_boxes(gt_boxes[matched[pos]], boxes[pos], cfg.roi_box_weights)
        return keep, cls_t, reg_t, len(pos)

    def roi_forward(self, features, proposals, gt_boxes, gt_labels, rng=None):
        """ROI loss: CE over sampled ROIs + smooth-L1 on positives.

        ``features`` maps provenance -> (B, h, w, C) tensor; each proposal pools
        from the feature map of its own view.  ``proposals`` is one ProposalSet
        per image; GT boxes are scored against every provenance group.
        """
        views = list(features)
        b, fh, fw, c = features[views[0]].shape
        flat = G.concat([G.reshape(features[v], (b * fh * fw, c)) for v in views], axis=0)
        all_boxes, all_index, all_cls, all_reg, n_pos = [], [], [], [], 0
        for i, props in enumerate(proposals):
            for vi, v in enumerate(views):
                mine = props.boxes[props.provenance == v]
                if self.cfg.roi_add_gt and len(gt_boxes[i]):
                    mine = np.concatenate([mine, gt_boxes[i]])
                if len(mine) == 0:
                    continue
                keep, cls_t, reg_t, npos = self.roi_targets(mine, gt_boxes[i], gt_labels[i], rng)
                all_boxes.append(mine[keep])
                all_index.append(np.full(len(keep), vi * b + i))
                all_cls.append(cls_t)
                all_reg.append((reg_t, np.arange(len(keep)) < npos))
                n_pos += npos
        if not all_boxes:
            raise ValueError("roi_forward needs at least one proposal")
        boxes = np.concatenate(all_boxes)
        cls_logits, reg = self.roi_logits(flat, b * len(views), (fh, fw), boxes, np.concatenate(all_index))
        cls_t = np.concatenate(all_cls)
        l_cls = G.cross_entropy(G.log_softmax(cls_logits), cls_t)
        reg_t = np.concatenate([r for r, _ in all_reg])
        pos_mask = np.concatenate([m for _, m in all_reg]).astype(np.float64)[:, None]
        l_reg = G.sum(G.mul(G.smooth_l1(reg, reg_t, beta=1.0, reduction="none"), pos_mask / len(cls_t)))
        return G.tag(G.add(l_cls, l_reg), "roi")

    # ---- inference

    def detect_batch(self, images, score_thresh=0.05, nms_iou=0.5, max_det=50):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        b, h, w, _ = images.shape
        with G.no_grad():
            feats = self.backbone(images)
            anchors = self.anchors_for(feats, h, w)
            logits, deltas = self.rpn_head(feats)
            props = [self.make_proposals(logits.data[i], deltas.data[i], anchors, h, w) for i in range(b)]
            boxes = np.concatenate([p.boxes for p in props])
            index = np.concatenate([np.full(len(p), i) for i, p in enumerate(props)])
            _, fh, fw, c = feats.shape
            if len(boxes) == 0:
                return [[] for _ in range(b)]
            grid = feats.data.reshape(b, fh * fw, c)
            pooled = np.einsum("rbk,rkc->rbc", roi_pool_weights(boxes, fh, fw, self.cfg.stride), grid[index])
            cls, reg = self.roi_head(G.Tensor(pooled.reshape(len(boxes), 4 * c)))
        logits = cls.data - cls.data.max(axis=1, keepdims=True)
        prob = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        refined = clip_boxes(decode_boxes(reg.data, boxes, self.cfg.roi_box_weights), h, w)
        out = []
        for i in range(b):
            sel = index == i
            dets = []
            for k in range(self.cfg.n_classes):
                s = prob[sel, k + 1]
                bx = refined[sel]
                ok = (s > score_thresh) & (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
                if not ok.any():
                    continue
                bx, s = bx[ok], s[ok]
                for j in nms(bx, s, nms_iou):
                    dets.append((BoxF(*map(float, bx[j])), k, float(s[j])))
            dets.sort(key=lambda d: -d[2])
            out.append(dets[:max_det])
        return out

    def detect(self, image, score_thresh=0.05, nms_iou=0.5, max_det=50):
        return self.detect_batch(np.asarray(image)[None], score_thresh, nms_iou, max_det)[0]

    def pooled_features(self, images):
        """Globally average-pooled backbone features, one row per image."""
        with G.no_grad():
            return self.backbone(images).data.mean(axis=(1, 2))

    # ---- persistence

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise G.ShapeError(f"load {k}", v.shape, arr.shape)
            v.data = arr.copy()


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, config: dict):
    doc = {"version": CHECKPOINT_VERSION, "config": config,
           "weights": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(params.items())}}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    weights = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["weights"].items()}
    return weights, doc["config"]


def detector_config_dict(cfg: DetectorConfig):
    return asdict(cfg)
