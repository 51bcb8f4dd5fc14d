# Output surfaces: report files and console summary
