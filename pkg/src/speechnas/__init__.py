"""SpeechNAS: D-TDNN architecture search on a small numpy autodiff core."""
