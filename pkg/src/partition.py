import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd

from .rng import stream

logger = logging.getLogger(__name__)


class PartitionError(ValueError):
    """데이터 분할 오류"""


class DatasetFormatError(ValueError):
    """CSV 데이터셋 형식 오류 (line: 1부터 시작하는 파일 줄 번호)"""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"{line}번째 줄: {message}" if line else message)
        self.line = line


@dataclass(frozen=True, eq=False)
class Dataset:
    """라벨이 있는 샘플 집합"""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise PartitionError(f"features {features.shape}와 labels {labels.shape} 크기 불일치")
        if self.num_classes < 1:
            raise PartitionError("num_classes는 1 이상이어야 함")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise PartitionError(f"라벨은 [0, {self.num_classes}) 범위여야 함")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class Partition:
    """K개 클라이언트 shard (데이터셋 인덱스, 오름차순 정렬)"""

    shards: Tuple[np.ndarray, ...]
    similarity: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def sizes(self) -> List[int]:
        return [len(shard) for shard in self.shards]

    def digest(self) -> str:
        """shard 구성의 SHA-256 요약"""
        hasher = hashlib.sha256()
        for shard in self.shards:
            hasher.update(np.int64(len(shard)).tobytes())
            hasher.update(np.ascontiguousarray(shard, dtype=np.int64).tobytes())
        return hasher.hexdigest()


def make_synthetic(
    num_classes: int, per_class: int, dim: int, class_separation: float, noise: float, seed: int
) -> Dataset:
    """가우시안 클래스 군집 데이터 생성

    클래스 c의 평균은 dim ≥ num_classes이면 (separation/√2)·e_c,
    아니면 c·separation·e_0 이므로 평균 간 거리는 항상 separation 이상이다.
    샘플 순서는 무작위로 섞는다.
    """
    if dim < 1:
        raise PartitionError(f"dim은 1 이상이어야 함: {dim}")
    if num_classes < 1 or per_class < 1:
        raise PartitionError("num_classes, per_class는 1 이상이어야 함")
    if noise < 0:
        raise PartitionError(f"noise는 0 이상이어야 함: {noise}")

    means = np.zeros((num_classes, dim))
    if dim >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = class_separation / np.sqrt(2.0)
    else:
        means[:, 0] = class_separation * np.arange(num_classes)

    rng = stream(seed, "synthetic")
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + noise * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def split_holdout(data: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """클래스별 층화 held-out 분리 → (학습, 테스트)

    클래스 c에서 round(fraction·n_c)개를 테스트로 보내되 학습에는 최소 1개를 남긴다.
    두 집합 모두 원래 샘플 순서를 유지한다.
    """
    if not 0.0 < fraction < 1.0:
        raise PartitionError(f"held-out 비율은 (0, 1) 범위여야 함: {fraction}")
    rng = stream(seed, "holdout")
    held = np.zeros(len(data), dtype=bool)
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        if members.size == 0:
            continue
        count = min(int(np.floor(fraction * members.size + 0.5)), members.size - 1)
        held[rng.permutation(members)[:count]] = True
    if not held.any():
        raise PartitionError(f"held-out 집합이 비어 있음 (fraction={fraction}, N={len(data)})")

    train = Dataset(data.features[~held], data.labels[~held], data.num_classes)
    test = Dataset(data.features[held], data.labels[held], data.num_classes)
    logger.debug("holdout: train=%d, test=%d", len(train), len(test))
    return train, test


def partition_similarity(data: Dataset, num_clients: int, similarity: float, seed: int) -> Partition:
    """유사도 s 분할

    round(s·N)개 샘플을 무작위로 뽑아 라운드로빈으로 나누고,
    나머지는 (라벨, 원래 인덱스) 순으로 정렬해 연속 블록으로 나눈다.
    블록 크기는 shard 크기 차이가 1 이하가 되도록 정한다.
    """
    n = len(data)
    if not 0.0 <= similarity <= 1.0:
        raise PartitionError(f"similarity는 [0, 1] 범위여야 함: {similarity}")
    if num_clients < 1:
        raise PartitionError(f"클라이언트 수는 1 이상이어야 함: {num_clients}")
    if num_clients > n:
        raise PartitionError(f"클라이언트 수 {num_clients}가 샘플 수 {n}보다 많음")

    num_random = int(np.floor(similarity * n + 0.5))
    order = stream(seed, "partition").permutation(n)
    random_part, rest = order[:num_random], order[num_random:]

    # 나머지는 라벨 → 원래 인덱스 순
    rest = rest[np.lexsort((rest, data.labels[rest]))]

    targets = [n // num_clients + (1 if k < n % num_clients else 0) for k in range(num_clients)]
    shards = []
    start = 0
    for k in range(num_clients):
        dealt = random_part[k::num_clients]
        block = targets[k] - len(dealt)
        shard = np.sort(np.concatenate([dealt, rest[start : start + block]]))
        shard.setflags(write=False)
        shards.append(shard)
        start += block

    logger.debug("partition: N=%d, K=%d, s=%.3f, random=%d", n, num_clients, similarity, num_random)
    return Partition(shards=tuple(shards), similarity=float(similarity), seed=int(seed))


def load_csv(path: Union[str, Path]) -> Dataset:
    """`label,feat_0,...` 형식 CSV 로드 (헤더 필수, 행 순서 유지)"""
    labels: List[int] = []
    rows: List[List[float]] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise DatasetFormatError("헤더가 없는 빈 파일", line=1)
        width = len(header)
        if width < 2:
            raise DatasetFormatError("label과 특징 열이 최소 1개씩 필요", line=1)

        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise DatasetFormatError(f"열 개수 {len(row)} != 헤더 열 개수 {width}", line=line)
            try:
                label = int(row[0])
                values = [float(field) for field in row[1:]]
            except ValueError:
                raise DatasetFormatError(f"숫자가 아닌 값: {row}", line=line) from None
            if label < 0:
                raise DatasetFormatError(f"음수 라벨: {label}", line=line)
            if not np.all(np.isfinite(values)):
                raise DatasetFormatError("NaN/Inf 특징값", line=line)
            labels.append(label)
            rows.append(values)

    if not rows:
        raise DatasetFormatError("데이터 행이 없음 (빈 데이터셋)")
    return Dataset(np.array(rows), np.array(labels), num_classes=max(labels) + 1)


def sample_batch(shard, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """shard에서 복원 추출로 batch_size개 인덱스 샘플링"""
    shard = np.asarray(shard, dtype=np.int64)
    if shard.size == 0:
        raise PartitionError("빈 shard")
    if batch_size < 1:
        raise PartitionError(f"batch_size는 1 이상이어야 함: {batch_size}")
    return shard[rng.integers(0, shard.size, size=batch_size)]


def label_histograms(data: Dataset, partition: Partition) -> np.ndarray:
    """shard별 라벨 개수 표 (K × C)"""
    return np.stack([np.bincount(data.labels[shard], minlength=data.num_classes) for shard in partition.shards])


def partition_stats(data: Dataset, partition: Partition) -> pd.DataFrame:
    """shard별 크기, 라벨 순도, 균등분포와의 total variation 거리"""
    counts = label_histograms(data, partition)
    sizes = counts.sum(axis=1)
    freqs = counts / sizes[:, None]
    frame = pd.DataFrame(counts, columns=[f"label_{c}" for c in range(data.num_classes)])
    frame.insert(0, "client", np.arange(partition.num_clients))
    frame.insert(1, "size", sizes)
    frame["purity"] = freqs.max(axis=1)
    frame["tv_uniform"] = 0.5 * np.abs(freqs - 1.0 / data.num_classes).sum(axis=1)
    return frame
