"""ITU admission prediction from clinical notes, end to end: synthetic EHR
corpora, dictionary concept annotation with context filtering, cohort
construction, chi-squared statistics, random forest and LSTM classifiers,
and an evaluation + explanation harness."""

__version__ = "0.1.0"
