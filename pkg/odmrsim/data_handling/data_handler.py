import csv
import logging
import os
from typing import Dict, Iterable, List, Optional, Sequence

import h5py
import numpy as np
import torch

from odmrsim.core.exceptions import ConfigError, InputError

logger = logging.getLogger(__name__)


def format_value(value) -> str:
    """Fixed text form of a CSV cell: floats with 9 significant digits."""
    if isinstance(value, torch.Tensor):
        value = value.item()
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return "{:.9g}".format(value)
    return str(value)


class ResultWriter:
    def __init__(self, out_dir: str, hdf5: bool = False):
        """
        Initialize the result writer.

        :param out_dir: Output directory, created if missing.
        :param hdf5: Also collect raw arrays into ``results.h5``.
        """
        self.out_dir = out_dir
        self.hdf5 = hdf5
        self.data: Dict[str, Dict] = {}
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as err:
            raise ConfigError(f"output.out: cannot create directory '{out_dir}': {err}")
        if not os.access(out_dir, os.W_OK):
            raise ConfigError(f"output.out: directory '{out_dir}' is not writable.")

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        """
        Write a comma separated table with a header row and LF line endings.

        :return: Path of the written file.
        """
        path = self.path(name)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            count = 0
            for row in rows:
                writer.writerow([format_value(v) for v in row])
                count += 1
        logger.info("Wrote %s (%d rows)", path, count)
        return path

    def write_text(self, name: str, text: str) -> str:
        path = self.path(name)
        with open(path, "w", newline="") as handle:
            handle.write(text)
        return path

    def collect_arrays(self, group: str, arrays: Dict[str, object], attrs: Optional[Dict] = None) -> None:
        """
        Buffer arrays (tensors, lists) under ``group`` for the HDF5 export.
        """
        if not self.hdf5:
            return
        entry = self.data.setdefault(group, {"arrays": {}, "attrs": {}})
        for key, value in arrays.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            entry["arrays"][key] = np.asarray(value)
        entry["attrs"].update(attrs or {})

    def flush_data(self) -> Optional[str]:
        if not self.hdf5 or not self.data:
            return None
        path = self.path("results.h5")
        with h5py.File(path, "a") as file:
            for group_name, entry in self.data.items():
                if group_name in file:
                    del file[group_name]
                group = file.create_group(group_name)
                for key, array in entry["arrays"].items():
                    if array.dtype.kind == "U":
                        array = array.astype(h5py.string_dtype())
                    group.create_dataset(key, data=array)
                for key, value in entry["attrs"].items():
                    group.attrs[key] = value
        self.data = {}
        logger.info("Wrote %s", path)
        return path

    def close(self) -> None:
        self.flush_data()


def read_spectrum_csv(path: str) -> List[List[float]]:
    """
    Read the ``frequency_mhz`` and ``contrast`` columns of a CSV file.

    :return: [[frequencies], [contrasts]] in file order.
    :raises InputError: On a missing column or an unparsable line, naming the line.
    """
    try:
        handle = open(path, newline="")
    except OSError as err:
        raise InputError(f"Cannot read '{path}': {err}")
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: file is empty.")
        header = [h.strip() for h in header]
        try:
            i_freq = header.index("frequency_mhz")
            i_contrast = header.index("contrast")
        except ValueError:
            raise InputError(f"{path}:1: header must contain 'frequency_mhz' and 'contrast', got {header}")
        freqs, contrasts = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                freqs.append(float(row[i_freq]))
                contrasts.append(float(row[i_contrast]))
            except (IndexError, ValueError):
                raise InputError(f"{path}:{line_no}: cannot parse row {row}")
    return [freqs, contrasts]
