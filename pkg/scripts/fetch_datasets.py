#!/usr/bin/env python3
"""
Download MNIST, FashionMNIST, CIFAR-10 and CIFAR-100 into the layout the
loaders expect under the data root (CCL_DATA_ROOT or --data-root).
"""

import argparse
import logging
import os
import sys
import tarfile
from pathlib import Path
from typing import List

import requests

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from infrastructure.datasets import DATASET_LAYOUT, IDX_FILES  # noqa: E402
from infrastructure.settings import Settings  # noqa: E402

# Configurar logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

IDX_SOURCES = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist",
    "fashion_mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com",
}
CIFAR_SOURCES = {
    "cifar10": "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    "cifar100": "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
}


class DatasetFetcher:
    """Downloads public dataset archives with one shared HTTP session"""

    def __init__(self, data_root: Path):
        self.data_root = Path(data_root)
        self.session = requests.Session()
        self.session.headers.update({'User-Agent': 'ccl-dataset-fetch/1.0'})

    def _download(self, url: str, target: Path) -> Path:
        if target.exists():
            logger.info(f"{target} already present, skipping")
            return target
        target.parent.mkdir(parents=True, exist_ok=True)
        logger.info(f"Downloading {url}")
        with self.session.get(url, stream=True, timeout=60) as response:
            response.raise_for_status()
            partial = target.with_name(target.name + ".part")
            with open(partial, "wb") as f:
                for chunk in response.iter_content(chunk_size=1 << 20):
                    f.write(chunk)
        partial.rename(target)
        return target

    def fetch_idx(self, name: str) -> List[Path]:
        """The four gzipped IDX files; the loaders read .gz directly"""
        base = self.data_root / DATASET_LAYOUT[name]["dir"]
        files = [f for pair in IDX_FILES.values() for f in pair]
        return [self._download(f"{IDX_SOURCES[name]}/{f}.gz", base / f"{f}.gz") for f in files]

    def fetch_cifar(self, name: str) -> Path:
        archive = self._download(CIFAR_SOURCES[name], self.data_root / Path(CIFAR_SOURCES[name]).name)
        extracted = self.data_root / DATASET_LAYOUT[name]["dir"]
        if not extracted.exists():
            logger.info(f"Extracting {archive}")
            with tarfile.open(archive, "r:gz") as tar:
                tar.extractall(self.data_root)
        return extracted

    def fetch(self, name: str) -> None:
        if name in IDX_SOURCES:
            self.fetch_idx(name)
        elif name in CIFAR_SOURCES:
            self.fetch_cifar(name)
        else:
            raise ValueError(f"unknown dataset '{name}'")
        logger.info(f"{name} ready under {self.data_root}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("datasets", nargs="+", choices=sorted(DATASET_LAYOUT))
    parser.add_argument("--data-root", default=None)
    args = parser.parse_args()

    root = args.data_root or Settings().data_root
    if not root:
        logger.error("No data root: pass --data-root or set CCL_DATA_ROOT")
        return 2
    fetcher = DatasetFetcher(Path(root))
    for name in args.datasets:
        try:
            fetcher.fetch(name)
        except requests.RequestException as e:
            logger.error(f"Download of {name} failed: {e}")
            return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
