"""FID/FVD-style proxies: Fréchet distance between Gaussian fits of fixed features."""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from worldplan.errors import CheckpointError
from worldplan.vision.encoder import group_norm

logger = logging.getLogger("worldplan.eval.frechet")

FEATURE_VERSION = 1
FEATURE_DIM = 16
THUMBNAIL = 8
MODES = ("image", "video")
FEATURE_NETS_FILE = "feature_nets.pt"


@dataclass(frozen=True)
class FrechetResult:
    """A Fréchet distance and the diagonal regularization it needed."""

    distance: float
    regularization: float = 0.0
    samples: int = 0


def fit_gaussian(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return the mean and (unbiased) covariance of rows of `features`."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(
            f"Need at least 2 feature vectors, got shape {features.shape}"
        )
    return features.mean(axis=0), np.cov(features, rowvar=False)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(
    mu1: np.ndarray,
    sigma1: np.ndarray,
    mu2: np.ndarray,
    sigma2: np.ndarray,
    eps: float = 1e-6,
) -> FrechetResult:
    """Return ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of the cross term is computed as the sum of square roots of
    the eigenvalues of S1^(1/2) S2 S1^(1/2), after projecting every matrix on
    its symmetric part. When either covariance is singular, `eps` is added to
    both diagonals and reported in the result.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ValueError(
            f"Mismatched Gaussians: means {mu1.shape} vs {mu2.shape}, "
            f"covariances {sigma1.shape} vs {sigma2.shape}"
        )
    sigma1 = (sigma1 + sigma1.T) / 2.0
    sigma2 = (sigma2 + sigma2.T) / 2.0
    regularization = 0.0
    smallest = min(np.linalg.eigvalsh(sigma1)[0], np.linalg.eigvalsh(sigma2)[0])
    if smallest < eps:
        regularization = eps
        offset = eps * np.eye(sigma1.shape[0])
        sigma1, sigma2 = sigma1 + offset, sigma2 + offset
        logger.debug("Singular covariance (min eig %.3g), added %g", smallest, eps)
    root = _sqrt_psd(sigma1)
    cross = root @ sigma2 @ root
    cross = (cross + cross.T) / 2.0
    trace_cross = float(np.sqrt(np.clip(np.linalg.eigvalsh(cross), 0.0, None)).sum())
    diff = mu1 - mu2
    traces = np.trace(sigma1) + np.trace(sigma2)
    distance = float(diff @ diff + traces - 2.0 * trace_cross)
    return FrechetResult(max(distance, 0.0), regularization)


class FrameEncoder(nn.Module):
    """Three strided conv blocks and global average pooling."""

    def __init__(self, width: int = 32):
        """Initialize the encoder."""
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            group_norm(16),
            nn.SiLU(),
            nn.Conv2d(16, width, 3, stride=2, padding=1),
            group_norm(width),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.SiLU(),
        )

    def forward(self, images: Tensor) -> Tensor:
        """Map (n, h, w, 3) in [0, 1] to pooled features (n, width)."""
        x = rearrange(images * 2.0 - 1.0, "n h w c -> n c h w")
        return self.net(x).mean(dim=(2, 3))


class ImageFeatureNet(nn.Module):
    """Per-image features, fitted by reconstructing a thumbnail."""

    def __init__(self, dim: int = FEATURE_DIM, width: int = 32):
        """Initialize the network."""
        super().__init__()
        self.encoder = FrameEncoder(width)
        self.project = nn.Linear(width, dim)
        self.decoder = nn.Linear(dim, 3 * THUMBNAIL * THUMBNAIL)

    def forward(self, images: Tensor) -> Tensor:
        """Return features of (n, h, w, 3) images."""
        return self.project(self.encoder(images))

    def reconstruction_loss(self, images: Tensor) -> Tensor:
        """Return the thumbnail reconstruction MSE."""
        pixels = rearrange(images, "n h w c -> n c h w")
        target = F.adaptive_avg_pool2d(pixels, THUMBNAIL)
        return F.mse_loss(self.decoder(self(images)), target.flatten(1))


class VideoFeatureNet(nn.Module):
    """Per-clip features: frame encoder, temporal convolution, temporal pooling.

    Fitted by reconstructing the clip's mean thumbnail and its mean absolute
    frame difference, so the features see both appearance and motion.
    """

    def __init__(self, dim: int = FEATURE_DIM, width: int = 32):
        """Initialize the network."""
        super().__init__()
        self.encoder = FrameEncoder(width)
        self.temporal = nn.Conv1d(width, width, 3, padding=1)
        self.project = nn.Linear(width, dim)
        self.decoder = nn.Linear(dim, 2 * 3 * THUMBNAIL * THUMBNAIL)

    def forward(self, videos: Tensor) -> Tensor:
        """Return features of (n, t, h, w, 3) clips."""
        n = videos.shape[0]
        frames = self.encoder(rearrange(videos, "n t h w c -> (n t) h w c"))
        frames = rearrange(frames, "(n t) d -> n d t", n=n)
        pooled = F.silu(self.temporal(frames)).mean(dim=2)
        return self.project(pooled)

    def reconstruction_loss(self, videos: Tensor) -> Tensor:
        """Return the appearance-and-motion reconstruction MSE."""
        n = videos.shape[0]
        thumbs = F.adaptive_avg_pool2d(
            rearrange(videos, "n t h w c -> (n t) c h w"), THUMBNAIL
        )
        thumbs = rearrange(thumbs, "(n t) c h w -> n t (c h w)", n=n)
        motion = (thumbs[:, 1:] - thumbs[:, :-1]).abs().mean(dim=1)
        target = torch.cat([thumbs.mean(dim=1), motion], dim=1)
        return F.mse_loss(self.decoder(self(videos)), target)


class FeatureNets:
    """The pair of fixed feature networks, versioned and checksummed."""

    def __init__(self, image: ImageFeatureNet, video: VideoFeatureNet):
        """Initialize from fitted networks; they are frozen from here on."""
        self.image = image.eval()
        self.video = video.eval()
        for net in (self.image, self.video):
            for parameter in net.parameters():
                parameter.requires_grad_(False)

    @property
    def checksum(self) -> str:
        """Return the SHA-256 of both networks' parameters and the version."""
        digest = hashlib.sha256(f"v{FEATURE_VERSION}".encode("ascii"))
        for prefix, net in (("image", self.image), ("video", self.video)):
            for key, value in sorted(net.state_dict().items()):
                digest.update(f"{prefix}.{key}".encode("utf-8"))
                digest.update(value.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def save(self, path: Path) -> Path:
        """Write both networks with their version and checksum."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "version": FEATURE_VERSION,
                "checksum": self.checksum,
                "image": self.image.state_dict(),
                "video": self.video.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: Path) -> "FeatureNets":
        """Read networks written by `save`; other versions or weights are refused."""
        path = Path(path)
        if not path.exists():
            raise CheckpointError(
                f"Feature networks {path} do not exist; run collect first"
            )
        payload = torch.load(path, map_location="cpu")
        if payload.get("version") != FEATURE_VERSION:
            raise CheckpointError(
                f"Feature networks {path} have version {payload.get('version')}, "
                f"expected {FEATURE_VERSION}"
            )
        image, video = ImageFeatureNet(), VideoFeatureNet()
        image.load_state_dict(payload["image"])
        video.load_state_dict(payload["video"])
        nets = cls(image, video)
        if nets.checksum != payload["checksum"]:
            raise CheckpointError(f"Feature networks {path} fail their checksum")
        return nets

    @torch.no_grad()
    def features(self, samples: Union[np.ndarray, Tensor], mode: str) -> np.ndarray:
        """Return float64 features of images (n, h, w, 3) or clips (n, t, h, w, 3)."""
        if mode not in MODES:
            raise ValueError(f"Unknown feature mode '{mode}', expected one of {MODES}")
        tensor = torch.as_tensor(np.asarray(samples, dtype=np.float32))
        net = self.image if mode == "image" else self.video
        chunks = [net(chunk) for chunk in torch.split(tensor, 64)]
        return torch.cat(chunks).double().numpy()


def feature_samples(
    episodes: Sequence[np.ndarray], clip_frames: int, limit: int, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw single-view images and clips from uint8 episodes (steps, views, h, w, 3).

    Returns float32 images (n, h, w, 3) and clips (n, clip_frames, h, w, 3)
    in [0, 1], at most `limit` of each.
    """
    rng = np.random.default_rng(seed)
    usable = [e for e in episodes if len(e) > clip_frames]
    if not usable:
        raise ValueError(f"No episode is longer than {clip_frames} frames")
    images, clips = [], []
    for _ in range(limit):
        episode = usable[int(rng.integers(len(usable)))]
        view = int(rng.integers(episode.shape[1]))
        start = int(rng.integers(len(episode) - clip_frames))
        images.append(episode[start, view])
        clips.append(episode[start : start + clip_frames, view])
    scale = np.float32(1.0 / 255.0)
    return np.stack(images) * scale, np.stack(clips) * scale


def fit_feature_nets(
    images: np.ndarray,
    clips: np.ndarray,
    iterations: int = 300,
    batch_size: int = 32,
    seed: int = 0,
    lr: float = 1e-3,
) -> FeatureNets:
    """Fit both networks on simulator images (n, h, w, 3) and clips (n, t, h, w, 3)."""
    if iterations < 1:
        raise ValueError(
            f"Feature networks need at least one iteration, got {iterations}"
        )
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    image_net, video_net = ImageFeatureNet(), VideoFeatureNet()
    for net, data in ((image_net, images), (video_net, clips)):
        optimizer = torch.optim.AdamW(net.parameters(), lr=lr)
        for iteration in range(iterations):
            picks = rng.integers(0, len(data), size=min(batch_size, len(data)))
            batch = torch.as_tensor(np.asarray(data[picks], dtype=np.float32))
            loss = net.reconstruction_loss(batch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        logger.info(
            "Fitted %s after %d iterations, reconstruction loss %.5f",
            type(net).__name__,
            iterations,
            float(loss.detach()),
        )
    nets = FeatureNets(image_net, video_net)
    logger.info("Feature networks checksum %s", nets.checksum[:12])
    return nets


def frechet_feature_distance(
    real_set: Union[np.ndarray, Tensor],
    gen_set: Union[np.ndarray, Tensor],
    mode: str,
    nets: FeatureNets,
    eps: float = 1e-6,
) -> FrechetResult:
    """Return the Fréchet distance between feature Gaussians of two sample sets."""
    if len(real_set) < 2 or len(gen_set) < 2:
        raise ValueError(
            f"Need at least 2 samples per set, got {len(real_set)} and {len(gen_set)}"
        )
    real = nets.features(real_set, mode)
    generated = nets.features(gen_set, mode)
    result = frechet_distance(*fit_gaussian(real), *fit_gaussian(generated), eps=eps)
    return FrechetResult(result.distance, result.regularization, len(gen_set))
