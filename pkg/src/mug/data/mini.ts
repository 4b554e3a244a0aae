@problemName MiniMotion
@univariate false
@classLabel true walk run
@data
0.1,0.2,0.3,0.4:1.0,0.9,0.8,0.7:walk
0.5,-0.5,0.25,-0.25:2.0,1.5,1.0,0.5:run
1.5,1.25,1.0,0.75:-0.1,-0.2,-0.3,-0.4:walk
