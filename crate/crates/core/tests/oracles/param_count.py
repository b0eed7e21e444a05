# Independent parameter count and feature-shape arithmetic for the default
# architecture: channels [8, 16, 32], 4 classes, 4 modalities, kernel 3.
#
#   channel encoder f_i : conv3 1->c0 (+bias)                 x4 modalities
#   backbone level l    : [transition conv3 c_{l-1}->c_l (+bias), l > 1]
#                         residual block (conv3, gn, relu, conv3, gn)
#   decoder level l<L   : conv3 (c_{l+1}+c_l)->c_l, gn
#   output head         : conv1 c0->J (+bias)
#   variational head k  : conv1 c_k->c_k (+bias), log_sigma[c_k]

def conv(cin, cout, k, bias):
    return cout * cin * k ** 3 + (cout if bias else 0)

def gn(c):
    return 2 * c

def count(channels, classes, modalities=4):
    total = modalities * conv(1, channels[0], 3, True)
    prev = channels[0]
    for i, c in enumerate(channels):
        if i > 0:
            total += conv(prev, c, 3, True)
        total += 2 * (conv(c, c, 3, False) + gn(c))
        prev = c
    for i in range(len(channels) - 2, -1, -1):
        total += conv(channels[i + 1] + channels[i], channels[i], 3, False) + gn(channels[i])
    total += conv(channels[0], classes, 1, True)
    for c in channels:
        total += conv(c, c, 1, True) + c
    return total

def shapes(channels, dim):
    return [[c, dim >> i, dim >> i, dim >> i] for i, c in enumerate(channels)]

print("default params:", count([8, 16, 32], 4))
print("tiny [4,4,8] J=4 params:", count([4, 4, 8], 4))
print("level shapes @16:", shapes([8, 16, 32], 16))
