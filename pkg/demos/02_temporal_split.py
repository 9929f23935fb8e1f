# coding: utf-8

# # Encoding discharge notes and splitting by time
#
# Each encounter lists a status for every concept in the vocabulary:
# Present, Negated or Missing. The network sees a 3V-wide one-hot vector.
# Training data for every site comes strictly before that site's test data.

import datetime as dt

import numpy as np

from msdann import data as dm
from msdann.data import CuiStatus, Dataset, EncounterRecord

P, N, M = CuiStatus.PRESENT, CuiStatus.NEGATED, CuiStatus.MISSING

# ## One record, encoded

rec = EncounterRecord("enc-1", "ER1", dt.date(2020, 5, 1), np.array([P, N, M]), 1)
batch = dm.encode([rec], ["fever", "cough", "dyspnea"])
print("statuses P N M ->", batch.x[0].astype(int).tolist())

# ## A 594-encounter site
#
# Two encounters a day for 297 days. With a 0.8 train fraction the cutoff is
# the day of the 475th encounter. That day is shared with the 476th
# encounter, and a shared day is never split, so both go to test.

day0 = dt.date(2020, 3, 16)
records = [EncounterRecord(f"e{i:03d}", "ER1", day0 + dt.timedelta(days=i // 2), np.array([M, M, M]), i % 2)
           for i in range(594)]
site = Dataset(("fever", "cough", "dyspnea"), records)
train, test = dm.temporal_split(site)
print(f"train {len(train)}  test {len(test)}")
print("last train day", max(r.encounter_date for r in train.records),
      " first test day", min(r.encounter_date for r in test.records))

# ## Manifests
#
# The split manifest lists the encounter ids on each side plus a hash of
# each list, so two runs can show they scored the same rows.

manifest = dm.split_manifest(train, test)
print("test sha256", manifest["test_sha256"][:16], "...")
