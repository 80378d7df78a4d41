# Copyright 2026 The ensdiag Authors.
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

"""Runs a tiny experiment through the CLI and validates report.json against
docs/report.schema.json, for a multi-member and a single-member ensemble."""

import json
import pathlib
import shutil
import subprocess
import sys

import jsonschema

TINY = """
[corpus]
kind = synthetic-grammar-text
seed = 3
n_docs = 150

[tokenizer]
scheme = bpe
vocab_size = 300

[model]
profile = desk
max_seq_len = 16
model_dim = 8
n_layers = 1
n_heads = 2
ffn_dim = 16

[train]
data_seed = 5
members = {members}
epochs = 1
sequences_per_epoch = 24
batch_size = 8
lr = 0.003

[analysis]
probes = 12
p_grid = 0.3, 1.0
k_grid = 1, 3, 5

[run]
threads = 1
"""


def main() -> int:
    cli, schema_path, work = sys.argv[1], pathlib.Path(sys.argv[2]), pathlib.Path(sys.argv[3])
    schema = json.loads(schema_path.read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    shutil.rmtree(work, ignore_errors=True)
    work.mkdir(parents=True)
    for members in (2, 1):
        ini = work / f"tiny_{members}.ini"
        ini.write_text(TINY.format(members=members))
        out = work / f"run_{members}"
        for cmd in ("tokenizer", "train", "analyze"):
            subprocess.run([cli, cmd, "--config", str(ini), "--out", str(out)], check=True, capture_output=True)
        report = json.loads((out / "report.json").read_text())
        jsonschema.validate(report, schema)
        print(f"members={members}: report valid")
    return 0


if __name__ == "__main__":
    sys.exit(main())
