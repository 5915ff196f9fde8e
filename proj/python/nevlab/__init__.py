# Licensed under the Apache License, Version 2.0 (the "License"); you
# may not use this file except in compliance with the License.  You
# may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
# implied.  See the License for the specific language governing
# permissions and limitations under the License.

"""Noise-robust vision-language bridge pre-training, Python surface.

The heavy lifting lives in the C++ extension ``_core``; this package
re-exports it.  Installed wheels carry the extension inside the package;
during development the build tree's ``bindings`` directory on
``PYTHONPATH`` provides it instead.
"""

try:
    from ._core import (
        attention_mask,
        cosine_lr,
        default_config,
        fit_gmm2,
        gen_data,
        gradcheck,
        itc_loss,
        l2_normalize_rows,
        nitc_loss,
        noise_posterior,
        per_sample_itc,
        resolve_config,
        roc_auc,
        run_stage1,
        run_stage2,
        smoothing_rates,
        softmax_rows,
    )
except ImportError:  # development layout
    from _core import (
        attention_mask,
        cosine_lr,
        default_config,
        fit_gmm2,
        gen_data,
        gradcheck,
        itc_loss,
        l2_normalize_rows,
        nitc_loss,
        noise_posterior,
        per_sample_itc,
        resolve_config,
        roc_auc,
        run_stage1,
        run_stage2,
        smoothing_rates,
        softmax_rows,
    )

__all__ = [
    "attention_mask",
    "cosine_lr",
    "default_config",
    "fit_gmm2",
    "gen_data",
    "gradcheck",
    "itc_loss",
    "l2_normalize_rows",
    "nitc_loss",
    "noise_posterior",
    "per_sample_itc",
    "resolve_config",
    "roc_auc",
    "run_stage1",
    "run_stage2",
    "smoothing_rates",
    "softmax_rows",
]
