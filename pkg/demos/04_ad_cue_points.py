"""Pick ad cue-points from boundary scores under spacing and count limits.

Selection is greedy by score: a boundary is taken if it clears the threshold,
is at least ``min_gap_seconds`` from everything already taken, and the budget
is not used up. The example also shows that greedy is not always optimal.
"""
from shotcol.boundary import CuePointConstraints, select_cue_points

times = [100.0, 160.0, 220.0, 600.0, 610.0]
scores = [0.70, 0.95, 0.72, 0.80, 0.85]
cons = CuePointConstraints(min_gap_seconds=90, max_count=3, score_threshold=0.5)
chosen = select_cue_points(scores, times, cons)
print("selected:", [(times[i], scores[i]) for i in chosen])
# 160s wins first and blocks both 100s and 220s, which together would have been
# two cue-points instead of one.
