# 玩具网络与压缩流水线
