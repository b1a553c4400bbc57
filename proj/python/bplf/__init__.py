# Copyright 2026 The BPLF Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Normalizing flows with sigmoid-bounded bipartite couplings."""

from ._core import (
    Model,
    MetricsRow,
    SuiteResult,
    bits_per_dim,
    read_idx_images,
    run_checks,
    set_worker_threads,
    sha256_hex,
    singular_values,
    svd_truncate,
    to_image,
    to_model_input,
    write_idx_images,
)

__all__ = [
    "Model",
    "MetricsRow",
    "SuiteResult",
    "bits_per_dim",
    "read_idx_images",
    "run_checks",
    "set_worker_threads",
    "sha256_hex",
    "singular_values",
    "svd_truncate",
    "to_image",
    "to_model_input",
    "write_idx_images",
]
